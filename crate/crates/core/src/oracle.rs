//! Centralized ground truth: the stacked network model `r = Aω + n`, its
//! weighted least-squares (= MMSE under flat priors) solution, the network
//! Cramér-Rao bound `(AᵀR⁻¹A)⁻¹`, and brute-force marginals of the joint
//! posterior.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianMessage;
use crate::linalg::{block_diag, min_eigenvalue, spd_inverse, symmetrize};
use crate::measurement::MeasurementSet;
use crate::topology::{NetworkGraph, NodeId};

/// Relative eigenvalue floor below which the normal matrix counts as singular.
const RANK_RTOL: f64 = 1e-12;

/// Stacked linear model over the unknowns `ω = [ω_i]_{i ≠ ref}` (node order).
#[derive(Debug, Clone, PartialEq)]
pub struct StackedModel {
    pub a: DMatrix<f64>,
    /// Measurements with the reference contribution moved to this side.
    pub r: DVector<f64>,
    /// Block-diagonal noise covariance, one block per edge in `edge_order`.
    pub cov: DMatrix<f64>,
    /// Ascending `(min, max)` edges; prior pseudo-measurements follow them.
    pub edge_order: Vec<(NodeId, NodeId)>,
    /// Column offset of each node's block; `None` for the reference.
    pub offsets: Vec<Option<usize>>,
    dims: Vec<usize>,
}

impl StackedModel {
    pub fn unknowns(&self) -> usize {
        self.a.ncols()
    }

    /// The slice of a stacked unknown-vector belonging to `node`.
    pub fn node_block(&self, v: &DVector<f64>, node: NodeId) -> Option<DVector<f64>> {
        self.offsets[node].map(|o| v.rows(o, self.dims[node]).into_owned())
    }

    pub fn node_cov_block(&self, c: &DMatrix<f64>, node: NodeId) -> Option<DMatrix<f64>> {
        self.offsets[node].map(|o| {
            let n = self.dims[node];
            c.view((o, o), (n, n)).into_owned()
        })
    }

    /// Adds informative priors as pseudo-measurements. Flat priors add nothing;
    /// singular priors contribute only along their informative directions.
    pub fn with_priors(&self, priors: &[GaussianMessage]) -> Result<StackedModel> {
        let mut rows_a: Vec<DMatrix<f64>> = vec![self.a.clone()];
        let mut rows_r: Vec<DVector<f64>> = vec![self.r.clone()];
        let mut cov_blocks: Vec<DMatrix<f64>> = vec![self.cov.clone()];
        for (node, prior) in priors.iter().enumerate() {
            let Some(offset) = self.offsets[node] else { continue };
            if prior.is_non_informative() {
                continue;
            }
            let eig = symmetrize(prior.precision()).symmetric_eigen();
            let scale = eig.eigenvalues.amax();
            for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
                if lambda <= RANK_RTOL * scale {
                    continue;
                }
                let u = eig.eigenvectors.column(idx);
                let mut row = DMatrix::zeros(1, self.unknowns());
                for (c, &v) in u.iter().enumerate() {
                    row[(0, offset + c)] = v * lambda.sqrt();
                }
                rows_a.push(row);
                rows_r.push(DVector::from_element(1, u.dot(prior.info()) / lambda.sqrt()));
                cov_blocks.push(DMatrix::identity(1, 1));
            }
        }
        let total: usize = rows_a.iter().map(|m| m.nrows()).sum();
        let mut a = DMatrix::zeros(total, self.unknowns());
        let mut r = DVector::zeros(total);
        let mut row0 = 0;
        for (ma, mr) in rows_a.iter().zip(&rows_r) {
            a.view_mut((row0, 0), (ma.nrows(), ma.ncols())).copy_from(ma);
            r.rows_mut(row0, mr.len()).copy_from(mr);
            row0 += ma.nrows();
        }
        Ok(StackedModel {
            a,
            r,
            cov: block_diag(cov_blocks.iter()),
            edge_order: self.edge_order.clone(),
            offsets: self.offsets.clone(),
            dims: self.dims.clone(),
        })
    }
}

fn unknown_offsets(graph: &NetworkGraph) -> (Vec<Option<usize>>, usize) {
    let mut next = 0;
    let offsets = (0..graph.num_nodes())
        .map(|i| {
            (i != graph.reference()).then(|| {
                let o = next;
                next += graph.antennas(i);
                o
            })
        })
        .collect();
    (offsets, next)
}

/// Stacks every link model in ascending edge order; the known reference
/// offsets `reference_value` are subtracted from the measurements.
pub fn stack(
    graph: &NetworkGraph,
    measurements: &MeasurementSet,
    reference_value: &DVector<f64>,
) -> Result<StackedModel> {
    measurements.validate_for(graph)?;
    let reference = graph.reference();
    if reference_value.len() != graph.antennas(reference) {
        return Err(Error::DimensionMismatch {
            expected: graph.antennas(reference),
            found: reference_value.len(),
        });
    }
    let (offsets, unknowns) = unknown_offsets(graph);
    let rows: usize = graph
        .edges()
        .iter()
        .map(|&(a, b)| graph.antennas(a) * graph.antennas(b))
        .sum();
    let mut a_big = DMatrix::zeros(rows, unknowns);
    let mut r_big = DVector::zeros(rows);
    let mut blocks = Vec::with_capacity(graph.edges().len());
    let mut row0 = 0;
    for &(a, b) in graph.edges() {
        let m = measurements.get(a, b).ok_or(Error::MissingMeasurement(a + 1, b + 1))?;
        let n = m.r.len();
        let mut r = m.r.clone();
        for (node, block) in [(m.tx, &m.a_tx), (m.rx, &m.a_rx)] {
            match offsets[node] {
                Some(o) => a_big.view_mut((row0, o), (n, block.ncols())).copy_from(block),
                None => r -= block * reference_value,
            }
        }
        r_big.rows_mut(row0, n).copy_from(&r);
        blocks.push(m.cov.clone());
        row0 += n;
    }
    Ok(StackedModel {
        a: a_big,
        r: r_big,
        cov: block_diag(blocks.iter()),
        edge_order: graph.edges().to_vec(),
        offsets,
        dims: graph.antenna_counts().to_vec(),
    })
}

fn normal_matrix(model: &StackedModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let w = spd_inverse(&model.cov, "stacked measurement covariance")?;
    let info = symmetrize(&(model.a.transpose() * &w * &model.a));
    if info.nrows() == 0 {
        return Err(Error::RankDeficient);
    }
    let scale = info.amax();
    if !(scale > 0.0) || min_eigenvalue(&info) <= RANK_RTOL * scale {
        return Err(Error::RankDeficient);
    }
    Ok((info, w))
}

/// `ω̂ = (AᵀR⁻¹A)⁻¹AᵀR⁻¹r` and its covariance `(AᵀR⁻¹A)⁻¹`.
pub fn centralized_mmse(model: &StackedModel) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (info, w) = normal_matrix(model)?;
    let cov = spd_inverse(&info, "network information matrix").map_err(|_| Error::RankDeficient)?;
    let rhs = model.a.transpose() * (&w * &model.r);
    Ok((&cov * rhs, cov))
}

/// Network bound `(AᵀR⁻¹A)⁻¹`.
pub fn centralized_crb(model: &StackedModel) -> Result<DMatrix<f64>> {
    let (info, _) = normal_matrix(model)?;
    spd_inverse(&info, "network information matrix").map_err(|_| Error::RankDeficient)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Builds the joint posterior precision factor by factor, solves for the joint
/// mean and eliminates every other node to get each node's marginal. The
/// reference node reports its known offsets with zero covariance.
pub fn brute_force_marginals(
    graph: &NetworkGraph,
    measurements: &MeasurementSet,
    priors: &[GaussianMessage],
    reference_value: &DVector<f64>,
) -> Result<Vec<Marginal>> {
    measurements.validate_for(graph)?;
    let reference = graph.reference();
    let (offsets, unknowns) = unknown_offsets(graph);
    if unknowns > 32 {
        return Err(Error::InvalidInput(format!(
            "brute-force marginals limited to 32 unknowns, got {unknowns}"
        )));
    }
    let mut joint = DMatrix::<f64>::zeros(unknowns, unknowns);
    let mut eta = DVector::<f64>::zeros(unknowns);
    for m in measurements.iter() {
        if !graph.has_edge(m.tx, m.rx) {
            continue;
        }
        let w = spd_inverse(&m.cov, "measurement covariance")?;
        let mut r = m.r.clone();
        let ends = [(m.tx, &m.a_tx), (m.rx, &m.a_rx)];
        for (node, block) in ends {
            if offsets[node].is_none() {
                r -= block * reference_value;
            }
        }
        for (ni, bi) in ends {
            let Some(oi) = offsets[ni] else { continue };
            let wt = bi.transpose() * &w;
            let mut e = eta.rows_mut(oi, bi.ncols());
            e += &wt * &r;
            for (nj, bj) in ends {
                let Some(oj) = offsets[nj] else { continue };
                let mut v = joint.view_mut((oi, oj), (bi.ncols(), bj.ncols()));
                v += &wt * bj;
            }
        }
    }
    for (node, prior) in priors.iter().enumerate() {
        if let Some(o) = offsets[node] {
            let n = graph.antennas(node);
            let mut v = joint.view_mut((o, o), (n, n));
            v += prior.precision();
            let mut e = eta.rows_mut(o, n);
            e += prior.info();
        }
    }
    let chol = symmetrize(&joint).cholesky().ok_or(Error::SingularPrecision)?;
    let mean = chol.solve(&eta);

    (0..graph.num_nodes())
        .map(|node| {
            let Some(o) = offsets[node] else {
                let n = graph.antennas(reference);
                return Ok(Marginal {
                    mean: reference_value.clone(),
                    covariance: DMatrix::zeros(n, n),
                });
            };
            let n = graph.antennas(node);
            let rest: Vec<usize> = (0..unknowns).filter(|c| *c < o || *c >= o + n).collect();
            let j_ii = joint.view((o, o), (n, n)).into_owned();
            let marginal_precision = if rest.is_empty() {
                j_ii
            } else {
                let own: Vec<usize> = (o..o + n).collect();
                let j_ir = joint.select_rows(own.iter()).select_columns(rest.iter());
                let j_rr = joint.select_rows(rest.iter()).select_columns(rest.iter());
                let chol_rr = symmetrize(&j_rr).cholesky().ok_or(Error::SingularPrecision)?;
                j_ii - &j_ir * chol_rr.solve(&j_ir.transpose())
            };
            Ok(Marginal {
                mean: mean.rows(o, n).into_owned(),
                covariance: spd_inverse(&marginal_precision, "marginal precision")
                    .map_err(|_| Error::SingularPrecision)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rank;
    use crate::measurement::{
        draw_oscillators, gaussian_draw, measure_edge, snr_db_to_noise_var, EdgeMeasurement, LinkChannel,
        MeasurementMode, TrainingKind, TrainingMatrix,
    };
    use crate::seed;

    fn scalar_link(tx: NodeId, rx: NodeId, r: f64, var: f64) -> EdgeMeasurement {
        EdgeMeasurement::new(tx, rx, DVector::from_element(1, r), DMatrix::from_element(1, 1, var), 1, 1).unwrap()
    }

    /// Oracle-mode measurements and the true offsets.
    fn scenario(graph: &NetworkGraph, seed: u64) -> (MeasurementSet, DVector<f64>) {
        let mut rng = seed::rng_from(seed);
        let osc = draw_oscillators(graph, 0.3, &mut rng);
        let var = snr_db_to_noise_var(15.0);
        let set = graph
            .edges()
            .iter()
            .map(|&(a, b)| {
                let (na, nb) = (graph.antennas(a), graph.antennas(b));
                let ch = LinkChannel::rayleigh(a, b, na, nb, var, &mut rng).unwrap();
                let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, na, &mut rng).unwrap();
                measure_edge(&osc[a], &osc[b], &ch, &tr, MeasurementMode::OracleMeasurement, &mut rng).unwrap()
            })
            .collect();
        let truth: Vec<f64> = osc[1..].iter().flat_map(|o| o.omega.iter().copied()).collect();
        (set, DVector::from_vec(truth))
    }

    #[test]
    fn two_node_model() {
        let g = NetworkGraph::path(vec![1, 1]);
        let set: MeasurementSet = std::iter::once(scalar_link(0, 1, 0.05, 0.2)).collect();
        let model = stack(&g, &set, &DVector::from_element(1, 0.01)).unwrap();
        assert_eq!(model.a, DMatrix::from_element(1, 1, -1.0));
        assert!((model.r[0] - 0.04).abs() < 1e-15);
        let model = stack(&g, &set, &DVector::zeros(1)).unwrap();
        let (w, cov) = centralized_mmse(&model).unwrap();
        assert!((w[0] + 0.05).abs() < 1e-15);
        assert!((cov[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((centralized_crb(&model).unwrap()[(0, 0)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn triangle_model_rows() {
        let g = NetworkGraph::complete(vec![1; 3]);
        let set: MeasurementSet = g.edges().iter().map(|&(a, b)| scalar_link(a, b, 0.0, 1.0)).collect();
        let model = stack(&g, &set, &DVector::zeros(1)).unwrap();
        assert_eq!(model.a, DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, -1.0]));
    }

    #[test]
    fn connected_graphs_have_full_column_rank() {
        for s in 0..50u64 {
            let k = 3 + (s % 6) as usize;
            let antennas: Vec<usize> = (0..k).map(|i| 1 + (i + s as usize) % 2).collect();
            let g = NetworkGraph::random_geometric(antennas, 100.0, 60.0, s).unwrap();
            let (set, _) = scenario(&g, s);
            let model = stack(&g, &set, &DVector::zeros(g.antennas(0))).unwrap();
            assert_eq!(rank(&model.a, 1e-10), model.unknowns());
            let crb = centralized_crb(&model).unwrap();
            assert_eq!(crb, crb.transpose());
            assert!(crb.cholesky().is_some());
        }
    }

    #[test]
    fn disconnected_graph_is_rank_deficient() {
        let g = NetworkGraph::new(vec![1; 3], vec![(0, 1)], 0).unwrap();
        let set: MeasurementSet = std::iter::once(scalar_link(0, 1, 0.0, 1.0)).collect();
        let model = stack(&g, &set, &DVector::zeros(1)).unwrap();
        assert!(matches!(centralized_mmse(&model), Err(Error::RankDeficient)));
    }

    #[test]
    fn noiseless_limit_recovers_truth() {
        let g = NetworkGraph::random_geometric(vec![2; 6], 100.0, 60.0, 1).unwrap();
        let mut rng = seed::rng_from(1);
        let osc = draw_oscillators(&g, 0.3, &mut rng);
        let set: MeasurementSet = g
            .edges()
            .iter()
            .map(|&(a, b)| {
                let cov = DMatrix::identity(4, 4) * 1e-12;
                let mut m = EdgeMeasurement::new(a, b, DVector::zeros(4), cov.clone(), 2, 2).unwrap();
                m.r = m.model_mean(&osc[a].omega, &osc[b].omega) + gaussian_draw(&cov, &mut rng).unwrap();
                m
            })
            .collect();
        let model = stack(&g, &set, &DVector::zeros(2)).unwrap();
        let (w, _) = centralized_mmse(&model).unwrap();
        for i in 1..6 {
            assert!((model.node_block(&w, i).unwrap() - &osc[i].omega).amax() < 1e-6);
        }
    }

    #[test]
    fn residual_is_orthogonal_to_the_model() {
        let g = NetworkGraph::random_geometric(vec![2; 8], 100.0, 50.0, 2).unwrap();
        let (set, _) = scenario(&g, 2);
        let model = stack(&g, &set, &DVector::zeros(2)).unwrap();
        let (w, _) = centralized_mmse(&model).unwrap();
        let rinv = model.cov.clone().try_inverse().unwrap();
        let g_res = model.a.transpose() * rinv * (&model.r - &model.a * &w);
        assert!(g_res.amax() < 1e-9);
    }

    #[test]
    fn adding_an_edge_never_increases_the_bound() {
        for s in 0..10u64 {
            let g = NetworkGraph::random_tree(vec![1, 2, 1, 2, 1, 2, 1], s).unwrap();
            let mut extra = None;
            'outer: for a in 0..7 {
                for b in a + 1..7 {
                    if !g.has_edge(a, b) {
                        extra = Some((a, b));
                        break 'outer;
                    }
                }
            }
            let (a, b) = extra.unwrap();
            let mut edges = g.edges().to_vec();
            edges.push((a, b));
            let g2 = NetworkGraph::new(g.antenna_counts().to_vec(), edges, 0).unwrap();
            let (set2, _) = scenario(&g2, 100 + s);
            let set1: MeasurementSet = set2.iter().filter(|m| g.has_edge(m.tx, m.rx)).cloned().collect();
            let c1 = centralized_crb(&stack(&g, &set1, &DVector::zeros(1)).unwrap()).unwrap();
            let c2 = centralized_crb(&stack(&g2, &set2, &DVector::zeros(1)).unwrap()).unwrap();
            assert!(min_eigenvalue(&(c1 - c2)) >= -1e-12);
        }
    }

    #[test]
    fn brute_force_means_equal_the_weighted_least_squares_solution() {
        let g = NetworkGraph::random_geometric(vec![2; 7], 100.0, 55.0, 3).unwrap();
        let (set, _) = scenario(&g, 3);
        let rv = DVector::from_vec(vec![0.01, -0.01]);
        let model = stack(&g, &set, &rv).unwrap();
        let (w, cov) = centralized_mmse(&model).unwrap();
        let priors: Vec<GaussianMessage> = (0..7).map(|i| GaussianMessage::non_informative(g.antennas(i))).collect();
        let marg = brute_force_marginals(&g, &set, &priors, &rv).unwrap();
        assert_eq!(marg[0].mean, rv);
        for i in 1..7 {
            assert!((model.node_block(&w, i).unwrap() - &marg[i].mean).amax() < 1e-10);
            assert!((model.node_cov_block(&cov, i).unwrap() - &marg[i].covariance).amax() < 1e-10);
        }
    }

    #[test]
    fn bound_matches_empirical_error_covariance() {
        let g = NetworkGraph::complete(vec![1; 4]);
        let mut rng = seed::rng_from(4);
        let covs: Vec<DMatrix<f64>> = (0..g.edges().len())
            .map(|e| DMatrix::from_element(1, 1, 1e-4 * (1.0 + e as f64)))
            .collect();
        let truth = DVector::from_vec(vec![0.0, 0.1, -0.05, 0.2]);
        let base: MeasurementSet = g
            .edges()
            .iter()
            .zip(&covs)
            .map(|(&(a, b), c)| scalar_link(a, b, 0.0, c[(0, 0)]))
            .collect();
        let crb = centralized_crb(&stack(&g, &base, &DVector::zeros(1)).unwrap()).unwrap();
        let trials = 100_000;
        let mut acc = DVector::<f64>::zeros(3);
        for _ in 0..trials {
            let set: MeasurementSet = g
                .edges()
                .iter()
                .zip(&covs)
                .map(|(&(a, b), c)| {
                    let r = truth[a] - truth[b] + gaussian_draw(c, &mut rng).unwrap()[0];
                    scalar_link(a, b, r, c[(0, 0)])
                })
                .collect();
            let (w, _) = centralized_mmse(&stack(&g, &set, &DVector::zeros(1)).unwrap()).unwrap();
            let e = w - truth.rows(1, 3);
            acc += e.map(|v| v * v);
        }
        for i in 0..3 {
            let emp = acc[i] / trials as f64;
            assert!(((emp - crb[(i, i)]) / crb[(i, i)]).abs() < 0.05);
        }
    }

    #[test]
    fn priors_become_pseudo_measurements() {
        let g = NetworkGraph::path(vec![1, 1]);
        let set: MeasurementSet = std::iter::once(scalar_link(0, 1, 0.05, 1.0)).collect();
        let mut priors = vec![GaussianMessage::non_informative(1); 2];
        priors[1] = GaussianMessage::from_moments(&DVector::from_element(1, 0.1), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        let model = stack(&g, &set, &DVector::zeros(1)).unwrap().with_priors(&priors).unwrap();
        let (w, cov) = centralized_mmse(&model).unwrap();
        // average of −0.05 and 0.1 with equal weights
        assert!((w[0] - 0.025).abs() < 1e-14);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-14);
    }
}
