//! Reconstructed average-consensus baseline and the network MSE metrics.
//!
//! This is a standard Metropolis-weight average consensus driven by noisy
//! relative-offset measurements, used as a stand-in for distributed
//! frequency-locked loops. It is not a reproduction of any particular loop
//! filter.
//!
//! ```text
//! ω_i ← ω_i + Σ_{j∈I(i)} w_ij ((ω_j − ω_i) + n_ij),   w_ij = 1 / (1 + max(deg_i, deg_j))
//! ```

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bp::{trajectory_csv_header, write_trajectory_row, BpTrajectory};
use crate::error::{Error, Result};
use crate::measurement::{miso_crb, snr_db_to_noise_var, TrainingMatrix};
use crate::topology::{NetworkGraph, NodeId};

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub values: Vec<f64>,
    pub iteration: usize,
}

impl ConsensusState {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, iteration: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusConfig {
    /// Variance of each fresh relative-offset measurement error.
    pub noise_var: f64,
}

impl ConsensusConfig {
    /// Noise at the single-antenna relative-CFO bound for unit channel gain.
    pub fn at_snr(snr_db: f64, train_len: usize) -> Result<Self> {
        Ok(Self {
            noise_var: scalar_link_crb(snr_db, train_len)?,
        })
    }
}

/// Relative-CFO bound of a single-antenna link with `|h| = 1`.
pub fn scalar_link_crb(snr_db: f64, train_len: usize) -> Result<f64> {
    let z = DMatrix::from_element(train_len, 1, Complex64::new(1.0, 0.0));
    let training = TrainingMatrix::new(z)?;
    let b = miso_crb(
        &[0.0],
        &DVector::from_element(1, Complex64::new(1.0, 0.0)),
        &training,
        snr_db_to_noise_var(snr_db),
    )?;
    Ok(b[(0, 0)])
}

/// Full iteration matrix `W` (off-diagonal Metropolis weights, diagonal
/// filling each row to one).
pub fn metropolis_weights(graph: &NetworkGraph) -> DMatrix<f64> {
    let k = graph.num_nodes();
    let mut w = DMatrix::zeros(k, k);
    for &(a, b) in graph.edges() {
        let v = 1.0 / (1.0 + graph.degree(a).max(graph.degree(b)) as f64);
        w[(a, b)] = v;
        w[(b, a)] = v;
    }
    for i in 0..k {
        let off: f64 = w.row(i).iter().sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

pub fn consensus_step<R: Rng + ?Sized>(
    state: &ConsensusState,
    graph: &NetworkGraph,
    config: &ConsensusConfig,
    rng: &mut R,
) -> Result<ConsensusState> {
    if graph.antenna_counts().iter().any(|&n| n != 1) {
        return Err(Error::InvalidInput("consensus baseline needs single-antenna nodes".into()));
    }
    if state.values.len() != graph.num_nodes() {
        return Err(Error::DimensionMismatch {
            expected: graph.num_nodes(),
            found: state.values.len(),
        });
    }
    let sd = config.noise_var.sqrt();
    let mut next = state.values.clone();
    for (i, slot) in next.iter_mut().enumerate() {
        let deg_i = graph.degree(i);
        for &j in graph.neighbors(i)? {
            let w = 1.0 / (1.0 + deg_i.max(graph.degree(j)) as f64);
            let noise = if sd > 0.0 {
                sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *slot += w * ((state.values[j] - state.values[i]) + noise);
        }
    }
    Ok(ConsensusState {
        values: next,
        iteration: state.iteration + 1,
    })
}

/// States `0..=iterations`, starting from `initial`.
pub fn run_consensus<R: Rng + ?Sized>(
    initial: Vec<f64>,
    graph: &NetworkGraph,
    config: &ConsensusConfig,
    iterations: usize,
    rng: &mut R,
) -> Result<Vec<ConsensusState>> {
    let mut states = Vec::with_capacity(iterations + 1);
    states.push(ConsensusState::new(initial));
    for _ in 0..iterations {
        let next = consensus_step(states.last().expect("non-empty"), graph, config, rng)?;
        states.push(next);
    }
    Ok(states)
}

/// Same row schema as [`BpTrajectory::to_csv`]; covariance cells stay empty.
pub fn consensus_trace_csv(states: &[ConsensusState]) -> String {
    let mut out = trajectory_csv_header(1);
    for s in states {
        for (node, v) in s.values.iter().enumerate() {
            write_trajectory_row(&mut out, s.iteration, node, Some(&[*v]), None, 1);
        }
    }
    out
}

/// One trial's per-iteration, per-node estimates; `None` marks a node without
/// a usable estimate yet.
pub type EstimateTrace = Vec<Vec<Option<DVector<f64>>>>;

pub fn trace_from_bp(traj: &BpTrajectory, iterations: usize) -> EstimateTrace {
    (0..=iterations).map(|l| traj.at(l).means.clone()).collect()
}

pub fn trace_from_consensus(states: &[ConsensusState]) -> EstimateTrace {
    states
        .iter()
        .map(|s| {
            s.values
                .iter()
                .map(|&v| Some(DVector::from_element(1, v)))
                .collect()
        })
        .collect()
}

fn padded_len(traces: &[EstimateTrace]) -> usize {
    traces.iter().map(Vec::len).max().unwrap_or(0)
}

fn entry(trace: &EstimateTrace, l: usize) -> &[Option<DVector<f64>>] {
    &trace[l.min(trace.len() - 1)]
}

/// `(1/K) Σ_i E‖μ_i − (1/K) Σ_j μ_j‖²` per iteration, averaged over traces.
/// Shorter traces hold their last entry.
pub fn mse_consensus(traces: &[EstimateTrace]) -> Vec<f64> {
    let len = padded_len(traces);
    (0..len)
        .map(|l| {
            let total: f64 = traces
                .iter()
                .map(|t| {
                    let vals: Vec<DVector<f64>> = entry(t, l)
                        .iter()
                        .map(|v| v.clone().expect("consensus values are always present"))
                        .collect();
                    let k = vals.len() as f64;
                    let avg = vals.iter().fold(DVector::zeros(vals[0].len()), |acc, v| acc + v) / k;
                    vals.iter().map(|v| (v - &avg).norm_squared()).sum::<f64>() / k
                })
                .sum();
            total / traces.len() as f64
        })
        .collect()
}

/// `(1/(K−1)) Σ_{i≠ref} E‖μ_i − ω_i‖²` per iteration, averaged over traces.
/// Nodes without an estimate contribute the prior mean zero.
pub fn mse_bp(traces: &[EstimateTrace], truths: &[Vec<DVector<f64>>], reference: NodeId) -> Vec<f64> {
    assert_eq!(traces.len(), truths.len(), "one truth per trace");
    let len = padded_len(traces);
    (0..len)
        .map(|l| {
            let total: f64 = traces
                .iter()
                .zip(truths)
                .map(|(t, truth)| {
                    let row = entry(t, l);
                    let k = row.len();
                    let sum: f64 = (0..k)
                        .filter(|&i| i != reference)
                        .map(|i| match &row[i] {
                            Some(m) => (m - &truth[i]).norm_squared(),
                            None => truth[i].norm_squared(),
                        })
                        .sum();
                    sum / (k - 1) as f64
                })
                .sum();
            total / traces.len() as f64
        })
        .collect()
}

/// First iteration at which `series` is within `rel` of its last value.
pub fn settling_iteration(series: &[f64], rel: f64) -> Option<usize> {
    let last = *series.last()?;
    series.iter().position(|&v| (v - last).abs() <= rel * last.abs())
}
