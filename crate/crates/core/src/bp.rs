//! Synchronous Gaussian belief propagation over the network factor graph.
//!
//! Every link `{i, j}` carries one pairwise likelihood factor `f_{i,j}`; every
//! node carries an optional prior. Per iteration `l`:
//!
//! 1. each variable node sends `m_{i→f}` = prior × all `m_{f'→i}^{(l−1)}`, `f' ≠ f`;
//! 2. each factor sends `m_{f→i}^{(l)}` = `∫ f · m_{j→f} dω_j`;
//! 3. beliefs are prior × all incoming factor messages.
//!
//! The reference node is conditioned out rather than given an infinite-precision
//! prior: factors on its links emit a fixed message and it holds no belief.
//! All messages are information-form, so the initial flat messages are exact zeros.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMessage;
use crate::linalg::spd_inverse;
use crate::measurement::{EdgeMeasurement, MeasurementSet};
use crate::topology::{NetworkGraph, NodeId};

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_ETA: f64 = 1e-8;

/// Ordered node pair. For factor-to-variable messages `from` is the far end of
/// the link and `to` the receiving node; for variable-to-factor messages `from`
/// is the sending node and `to` the far end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DirectedEdgeKey {
    pub from: NodeId,
    pub to: NodeId,
}

impl DirectedEdgeKey {
    pub fn new(from: NodeId, to: NodeId) -> Self {
        Self { from, to }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpConfig {
    pub max_iter: usize,
    /// Convergence threshold on `‖μ^(l) − μ^(l−1)‖`, radians/sample.
    pub eta: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            eta: DEFAULT_ETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpState {
    pub iteration: usize,
    /// `m_{f_{i,j}→i}` keyed `(from: j, to: i)`.
    pub f2v: BTreeMap<DirectedEdgeKey, GaussianMessage>,
    /// `m_{i→f_{i,j}}` keyed `(from: i, to: j)`.
    pub v2f: BTreeMap<DirectedEdgeKey, GaussianMessage>,
    /// `None` for the reference node.
    pub beliefs: Vec<Option<GaussianMessage>>,
    pub priors: Vec<GaussianMessage>,
}

impl BpState {
    pub fn f2v(&self, from: NodeId, to: NodeId) -> Option<&GaussianMessage> {
        self.f2v.get(&DirectedEdgeKey::new(from, to))
    }

    pub fn v2f(&self, from: NodeId, to: NodeId) -> Option<&GaussianMessage> {
        self.v2f.get(&DirectedEdgeKey::new(from, to))
    }
}

/// Factor-to-variable message of link factor `m` towards `target`, given the
/// far end's variable-to-factor message `incoming`.
///
/// Computed as the Schur complement of the factor's joint information form
/// after absorbing `incoming`, which equals
/// `Λ = A_iᵀ[R + A_j C_in A_jᵀ]⁻¹A_i`, `v = Λ⁻¹ A_iᵀ[R + A_j C_in A_jᵀ]⁻¹(r − A_j v_in)`
/// whenever `C_in` exists. A flat `incoming` leaves only the information the
/// link carries about differences between `target`'s own antennas; for a
/// single-antenna target the result is exactly zero.
pub fn factor_to_variable(
    m: &EdgeMeasurement,
    target: NodeId,
    incoming: &GaussianMessage,
) -> Result<GaussianMessage> {
    let (a_i, a_j) = link_blocks(m, target)?;
    if incoming.dim() != a_j.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a_j.ncols(),
            found: incoming.dim(),
        });
    }
    let w = spd_inverse(&m.cov, "measurement covariance")?;
    let wa_i = &w * a_i;
    let wa_j = &w * a_j;
    let j_ii = a_i.transpose() * &wa_i;
    let j_ij = a_i.transpose() * &wa_j;
    let j_jj = a_j.transpose() * &wa_j;
    let h_i = wa_i.transpose() * &m.r;
    let h_j = wa_j.transpose() * &m.r;

    if incoming.is_non_informative() {
        let s_inv = spd_inverse(&j_jj, "link information about the far end")?;
        let precision = &j_ii - &j_ij * &s_inv * j_ij.transpose();
        let info = &h_i - &j_ij * (&s_inv * &h_j);
        // Exactly flat along the common shift of the target's antennas.
        let n = a_i.ncols();
        let proj = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        return Ok(GaussianMessage::from_parts(&proj * precision * &proj, &proj * info));
    }

    let s = j_jj + incoming.precision();
    let s_inv = spd_inverse(&s, "factor marginalisation matrix")?;
    let precision = &j_ii - &j_ij * &s_inv * j_ij.transpose();
    let info = &h_i - &j_ij * (&s_inv * (h_j + incoming.info()));
    Ok(GaussianMessage::from_parts(precision, info))
}

/// Fixed message from a factor on a link to the reference node, whose offsets
/// are known: `Λ = A_iᵀR⁻¹A_i`, `η = A_iᵀR⁻¹(r − A_ref ω_ref)`.
pub fn reference_factor_message(
    m: &EdgeMeasurement,
    target: NodeId,
    reference_value: &DVector<f64>,
) -> Result<GaussianMessage> {
    let (a_i, a_ref) = link_blocks(m, target)?;
    if reference_value.len() != a_ref.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a_ref.ncols(),
            found: reference_value.len(),
        });
    }
    let w = spd_inverse(&m.cov, "measurement covariance")?;
    let wa_i = &w * a_i;
    let precision = a_i.transpose() * &wa_i;
    let info = wa_i.transpose() * (&m.r - a_ref * reference_value);
    Ok(GaussianMessage::from_parts(precision, info))
}

fn link_blocks(m: &EdgeMeasurement, target: NodeId) -> Result<(&DMatrix<f64>, &DMatrix<f64>)> {
    let other = m.other_end(target).ok_or(Error::UnknownNode(target))?;
    Ok((
        m.structure_for(target).ok_or(Error::UnknownNode(target))?,
        m.structure_for(other).ok_or(Error::UnknownNode(other))?,
    ))
}

/// Prior times every incoming factor message of `node` except the one on the
/// link to `excluded`.
pub fn variable_to_factor(
    state: &BpState,
    graph: &NetworkGraph,
    node: NodeId,
    excluded: NodeId,
) -> Result<GaussianMessage> {
    if !graph.has_edge(node, excluded) {
        return Err(Error::InvalidInput(format!(
            "no link between nodes {} and {}",
            node + 1,
            excluded + 1
        )));
    }
    let mut out = state.priors[node].clone();
    for &j in graph.neighbors(node)? {
        if j != excluded {
            if let Some(msg) = state.f2v(j, node) {
                out.absorb(msg);
            }
        }
    }
    Ok(out)
}

/// Prior times all incoming factor messages of `node`.
pub fn compute_belief(state: &BpState, graph: &NetworkGraph, node: NodeId) -> Result<GaussianMessage> {
    let mut out = state.priors[node].clone();
    for &j in graph.neighbors(node)? {
        if let Some(msg) = state.f2v(j, node) {
            out.absorb(msg);
        }
    }
    Ok(out)
}

/// Per-node beliefs at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationSnapshot {
    pub iteration: usize,
    /// `None` for the reference node.
    pub beliefs: Vec<Option<GaussianMessage>>,
    /// `None` until the belief is positive definite. The reference node
    /// reports its known offsets.
    pub means: Vec<Option<DVector<f64>>>,
    /// Belief covariances `P_i`; zero for the reference node.
    pub covariances: Vec<Option<DMatrix<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpTrajectory {
    /// `snapshots[l]` is iteration `l`; `snapshots[0]` is the initial state.
    pub snapshots: Vec<IterationSnapshot>,
    pub converged: bool,
    pub iterations_run: usize,
}

impl BpTrajectory {
    pub fn last(&self) -> &IterationSnapshot {
        self.snapshots.last().expect("trajectory holds the initial snapshot")
    }

    /// Snapshot for iteration `l`; past the stopping point the final state is
    /// returned, since nothing changes after convergence.
    pub fn at(&self, l: usize) -> &IterationSnapshot {
        &self.snapshots[l.min(self.snapshots.len() - 1)]
    }

    /// Final estimates `ω̂_i = μ_i`.
    pub fn estimates(&self) -> &[Option<DVector<f64>>] {
        &self.last().means
    }

    /// CSV dump, one row per iteration and node:
    /// `iter,node,mean_1..mean_M,cov_1..cov_M` with `M` the largest antenna
    /// count. Missing values are empty cells; node ids are 1-based.
    pub fn to_csv(&self, max_antennas: usize) -> String {
        let mut out = trajectory_csv_header(max_antennas);
        for snap in &self.snapshots {
            for (node, mean) in snap.means.iter().enumerate() {
                let cov_diag = snap.covariances[node]
                    .as_ref()
                    .map(|c| c.diagonal().iter().copied().collect::<Vec<_>>());
                let mean = mean.as_ref().map(|m| m.iter().copied().collect::<Vec<_>>());
                write_trajectory_row(&mut out, snap.iteration, node, mean.as_deref(), cov_diag.as_deref(), max_antennas);
            }
        }
        out
    }
}

pub fn trajectory_csv_header(max_antennas: usize) -> String {
    let mut h = String::from("iter,node");
    for a in 1..=max_antennas {
        let _ = write!(h, ",mean_{a}");
    }
    for a in 1..=max_antennas {
        let _ = write!(h, ",cov_{a}");
    }
    h.push('\n');
    h
}

pub fn write_trajectory_row(
    out: &mut String,
    iteration: usize,
    node: NodeId,
    mean: Option<&[f64]>,
    cov_diag: Option<&[f64]>,
    max_antennas: usize,
) {
    let _ = write!(out, "{},{}", iteration, node + 1);
    for values in [mean, cov_diag] {
        for a in 0..max_antennas {
            out.push(',');
            if let Some(v) = values.and_then(|v| v.get(a)) {
                let _ = write!(out, "{v:e}");
            }
        }
    }
    out.push('\n');
}

/// Message-passing engine for one graph and one set of link measurements.
#[derive(Debug, Clone)]
pub struct BeliefPropagation<'a> {
    graph: &'a NetworkGraph,
    measurements: &'a MeasurementSet,
    priors: Vec<GaussianMessage>,
    reference_value: DVector<f64>,
}

impl<'a> BeliefPropagation<'a> {
    /// `priors` defaults to non-informative for every node. The reference
    /// node's offsets default to zero.
    pub fn new(
        graph: &'a NetworkGraph,
        measurements: &'a MeasurementSet,
        priors: Option<Vec<GaussianMessage>>,
    ) -> Result<Self> {
        measurements.validate_for(graph)?;
        let priors = match priors {
            Some(p) => {
                if p.len() != graph.num_nodes() {
                    return Err(Error::DimensionMismatch {
                        expected: graph.num_nodes(),
                        found: p.len(),
                    });
                }
                for (i, prior) in p.iter().enumerate() {
                    if prior.dim() != graph.antennas(i) {
                        return Err(Error::DimensionMismatch {
                            expected: graph.antennas(i),
                            found: prior.dim(),
                        });
                    }
                }
                p
            }
            None => non_informative_priors(graph),
        };
        let reference_value = DVector::zeros(graph.antennas(graph.reference()));
        Ok(Self {
            graph,
            measurements,
            priors,
            reference_value,
        })
    }

    pub fn with_reference_value(mut self, omega: DVector<f64>) -> Result<Self> {
        if omega.len() != self.reference_value.len() {
            return Err(Error::DimensionMismatch {
                expected: self.reference_value.len(),
                found: omega.len(),
            });
        }
        self.reference_value = omega;
        Ok(self)
    }

    fn measurement(&self, a: NodeId, b: NodeId) -> Result<&EdgeMeasurement> {
        self.measurements
            .get(a, b)
            .ok_or(Error::MissingMeasurement(a + 1, b + 1))
    }

    /// Iteration-0 state: every message flat, beliefs equal to the priors.
    pub fn init(&self) -> BpState {
        let g = self.graph;
        let reference = g.reference();
        let mut f2v = BTreeMap::new();
        let mut v2f = BTreeMap::new();
        for &(a, b) in g.edges() {
            for (from, to) in [(a, b), (b, a)] {
                if to != reference {
                    f2v.insert(DirectedEdgeKey::new(from, to), GaussianMessage::non_informative(g.antennas(to)));
                }
                if from != reference && to != reference {
                    v2f.insert(DirectedEdgeKey::new(from, to), GaussianMessage::non_informative(g.antennas(from)));
                }
            }
        }
        let beliefs = (0..g.num_nodes())
            .map(|i| (i != reference).then(|| self.priors[i].clone()))
            .collect();
        BpState {
            iteration: 0,
            f2v,
            v2f,
            beliefs,
            priors: self.priors.clone(),
        }
    }

    /// One synchronous iteration: all variable-to-factor messages from the
    /// previous factor messages, then all factor messages from those.
    pub fn step(&self, prev: &BpState) -> Result<BpState> {
        let g = self.graph;
        let reference = g.reference();

        let mut v2f = BTreeMap::new();
        for key in prev.v2f.keys() {
            v2f.insert(*key, variable_to_factor(prev, g, key.from, key.to)?);
        }

        let mut f2v = BTreeMap::new();
        for key in prev.f2v.keys() {
            let (far, target) = (key.from, key.to);
            let m = self.measurement(far, target)?;
            let msg = if far == reference {
                reference_factor_message(m, target, &self.reference_value)?
            } else {
                let incoming = &v2f[&DirectedEdgeKey::new(far, target)];
                factor_to_variable(m, target, incoming)?
            };
            f2v.insert(*key, msg);
        }

        let mut next = BpState {
            iteration: prev.iteration + 1,
            f2v,
            v2f,
            beliefs: Vec::new(),
            priors: prev.priors.clone(),
        };
        next.beliefs = (0..g.num_nodes())
            .map(|i| {
                if i == reference {
                    Ok(None)
                } else {
                    compute_belief(&next, g, i).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        Ok(next)
    }

    fn snapshot(&self, state: &BpState) -> IterationSnapshot {
        let reference = self.graph.reference();
        let mut means = Vec::with_capacity(state.beliefs.len());
        let mut covariances = Vec::with_capacity(state.beliefs.len());
        for (i, belief) in state.beliefs.iter().enumerate() {
            if i == reference {
                let n = self.reference_value.len();
                means.push(Some(self.reference_value.clone()));
                covariances.push(Some(DMatrix::zeros(n, n)));
                continue;
            }
            match belief.as_ref().map(GaussianMessage::to_moments) {
                Some(Ok((m, c))) => {
                    means.push(Some(m));
                    covariances.push(Some(c));
                }
                _ => {
                    means.push(None);
                    covariances.push(None);
                }
            }
        }
        IterationSnapshot {
            iteration: state.iteration,
            beliefs: state.beliefs.clone(),
            means,
            covariances,
        }
    }

    /// Runs until every node with a positive-definite belief moved less than
    /// `eta` in the last iteration (and no node newly became positive
    /// definite) while every factor message changed by less than `eta`
    /// relative to its size, or `max_iter` iterations.
    pub fn run(&self, config: &BpConfig) -> Result<BpTrajectory> {
        let reference = self.graph.reference();
        let mut state = self.init();
        let mut snapshots = vec![self.snapshot(&state)];
        let mut converged = false;
        while state.iteration < config.max_iter {
            let next = self.step(&state)?;
            let messages_settled = messages_settled(&state, &next, config.eta);
            state = next;
            let snap = self.snapshot(&state);
            let prev = snapshots.last().expect("non-empty");
            let settled = (0..self.graph.num_nodes())
                .filter(|&i| i != reference)
                .all(|i| match (&prev.means[i], &snap.means[i]) {
                    (Some(a), Some(b)) => (b - a).norm() < config.eta,
                    (None, None) => true,
                    _ => false,
                });
            snapshots.push(snap);
            if settled && messages_settled {
                converged = true;
                break;
            }
        }
        Ok(BpTrajectory {
            iterations_run: state.iteration,
            snapshots,
            converged,
        })
    }
}

fn messages_settled(prev: &BpState, next: &BpState, eta: f64) -> bool {
    prev.f2v.iter().all(|(key, a)| {
        let b = &next.f2v[key];
        let dp = (b.precision() - a.precision()).amax();
        let di = (b.info() - a.info()).amax();
        dp <= eta * (1.0 + a.precision().amax()) && di <= eta * (1.0 + a.info().amax())
    })
}

pub fn non_informative_priors(graph: &NetworkGraph) -> Vec<GaussianMessage> {
    (0..graph.num_nodes())
        .map(|i| GaussianMessage::non_informative(graph.antennas(i)))
        .collect()
}
