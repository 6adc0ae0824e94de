//! One seeded Monte-Carlo trial: network, oscillators, link measurements,
//! belief propagation and the centralized references.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::bp::{BeliefPropagation, BpConfig, BpTrajectory};
use crate::error::{Error, Result};
use crate::measurement::{
    draw_oscillators, measure_edge, snr_db_to_noise_var, true_link_covariance, EdgeMeasurement, LinkChannel,
    MeasurementMode, MeasurementSet, TrainingMatrix,
};
use crate::oracle::{centralized_crb, centralized_mmse, stack};
use crate::seed;
use crate::topology::{EdgeList, NetworkGraph};

use super::config::{ScenarioConfig, TopologySpec};

/// A validated config plus the network when it is fixed across trials.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    fixed_graph: Option<Arc<NetworkGraph>>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let fixed_graph = match &config.topology {
            TopologySpec::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let list = EdgeList::parse(&text)?;
                let antennas = config.antennas_for(list.num_nodes)?;
                let g = list.into_graph(antennas)?;
                if !g.is_connected() {
                    return Err(Error::InvalidGraph(format!("{} is not connected", path.display())));
                }
                Some(Arc::new(g))
            }
            TopologySpec::Random { .. } if !config.resample_topology => {
                let s = config
                    .topology_seed
                    .unwrap_or_else(|| seed::derive(config.seed, "topology", &[]));
                Some(Arc::new(random_graph(&config, s)?))
            }
            TopologySpec::Random { .. } => None,
        };
        let max = fixed_graph
            .as_ref()
            .map_or_else(|| *config.antennas.iter().max().expect("validated"), |g| g.max_antennas());
        if config.mode == MeasurementMode::FullSignal && config.train_len.iter().any(|&n| n <= 2 * max) {
            return Err(Error::Config(format!(
                "the estimator needs train_len above twice the antenna count {max}"
            )));
        }
        Ok(Self { config, fixed_graph })
    }

    /// Network used by trial `index`.
    pub fn graph(&self, index: usize) -> Result<Arc<NetworkGraph>> {
        match &self.fixed_graph {
            Some(g) => Ok(Arc::clone(g)),
            None => Ok(Arc::new(random_graph(
                &self.config,
                seed::derive(self.config.seed, "topology", &[index as u64]),
            )?)),
        }
    }

    pub fn fixed_graph(&self) -> Option<&NetworkGraph> {
        self.fixed_graph.as_deref()
    }
}

fn random_graph(config: &ScenarioConfig, s: u64) -> Result<NetworkGraph> {
    match config.topology {
        TopologySpec::Random { nodes, side, comm_range } => {
            NetworkGraph::random_geometric(config.antennas_for(nodes)?, side, comm_range, s)
        }
        TopologySpec::File(_) => unreachable!("file topologies are loaded once"),
    }
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub index: usize,
    pub snr_db: f64,
    pub train_len: usize,
    pub graph: Arc<NetworkGraph>,
    /// True offsets per node; the reference node's are zero.
    pub truth: Vec<DVector<f64>>,
    pub measurements: MeasurementSet,
    pub trajectory: BpTrajectory,
    /// Centralized solution from the same measurements and covariances BP used.
    pub mmse: Vec<Option<DVector<f64>>>,
    /// Centralized bound with every link covariance at the true parameters.
    pub crb: DMatrix<f64>,
    /// `tr` of each node's diagonal block of `crb`; zero for the reference.
    pub crb_trace: Vec<f64>,
    pub ml_invocations: usize,
    pub ml_warnings: usize,
}

impl TrialRecord {
    /// `‖μ_i^(l) − ω_i‖²`, with a missing estimate counted as the prior mean zero.
    pub fn squared_error(&self, node: usize, iteration: usize) -> f64 {
        sq_err(&self.trajectory.at(iteration).means[node], &self.truth[node])
    }

    pub fn final_squared_error(&self, node: usize) -> f64 {
        sq_err(&self.trajectory.last().means[node], &self.truth[node])
    }
}

fn sq_err(est: &Option<DVector<f64>>, truth: &DVector<f64>) -> f64 {
    match est {
        Some(m) => (m - truth).norm_squared(),
        None => truth.norm_squared(),
    }
}

/// Trial `index` at one operating point. Deterministic in
/// `(config.seed, index, train_len, snr_db)`; the network, offsets and channel
/// gains depend on `(seed, index)` only, so all operating points share them.
pub fn run_trial(scenario: &Scenario, snr_db: f64, train_len: usize, index: usize) -> Result<TrialRecord> {
    let cfg = &scenario.config;
    let graph = scenario.graph(index)?;
    let i = index as u64;
    let master = cfg.seed;
    let mut osc_rng = seed::stream(master, "oscillators", &[i]);
    let mut gain_rng = seed::stream(master, "channel", &[i]);
    let mut train_rng = seed::stream(master, "training", &[i, train_len as u64]);
    let mut noise_rng = seed::stream(master, "noise", &[i, train_len as u64, snr_db.to_bits()]);

    let osc = draw_oscillators(&graph, cfg.cfo_range, &mut osc_rng);
    let noise_var = snr_db_to_noise_var(snr_db);
    let mut measurements = MeasurementSet::new();
    let mut true_set = MeasurementSet::new();
    let mut ml_invocations = 0;
    let mut ml_warnings = 0;
    for &(a, b) in graph.edges() {
        let (na, nb) = (graph.antennas(a), graph.antennas(b));
        let channel = LinkChannel::rayleigh(a, b, na, nb, noise_var, &mut gain_rng)?;
        let training = TrainingMatrix::generate(cfg.training, train_len, na, &mut train_rng)?;
        let m = measure_edge(&osc[a], &osc[b], &channel, &training, cfg.mode, &mut noise_rng)?;
        ml_invocations += m.ml_invocations;
        ml_warnings += m.ml_warnings;
        let true_cov = match cfg.mode {
            MeasurementMode::OracleMeasurement => m.cov.clone(),
            MeasurementMode::FullSignal => true_link_covariance(&osc[a], &osc[b], &channel, &training)?,
        };
        true_set.insert(EdgeMeasurement::new(a, b, m.r.clone(), true_cov, na, nb)?);
        measurements.insert(m);
    }

    let reference_value = DVector::zeros(graph.antennas(graph.reference()));
    let trajectory = BeliefPropagation::new(&graph, &measurements, None)?.run(&BpConfig {
        max_iter: cfg.max_iter,
        eta: cfg.eta,
    })?;

    let model = stack(&graph, &measurements, &reference_value)?;
    let (w, _) = centralized_mmse(&model)?;
    let mmse = (0..graph.num_nodes())
        .map(|n| if n == graph.reference() { Some(reference_value.clone()) } else { model.node_block(&w, n) })
        .collect();
    let true_model = stack(&graph, &true_set, &reference_value)?;
    let crb = centralized_crb(&true_model)?;
    let crb_trace = (0..graph.num_nodes())
        .map(|n| true_model.node_cov_block(&crb, n).map_or(0.0, |b| b.trace()))
        .collect();

    Ok(TrialRecord {
        index,
        snr_db,
        train_len,
        truth: osc.into_iter().map(|o| o.omega).collect(),
        graph,
        measurements,
        trajectory,
        mmse,
        crb,
        crb_trace,
        ml_invocations,
        ml_warnings,
    })
}
