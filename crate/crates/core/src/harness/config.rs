//! Flat `key = value` scenario files.
//!
//! ```text
//! # SNR sweep on resampled networks
//! topology = random
//! nodes = 14
//! snr_db = 10, 20, 30
//! train_len = 16, 32
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are an
//! error. List values are comma separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bp::{DEFAULT_ETA, DEFAULT_MAX_ITER};
use crate::error::{Error, Result};
use crate::measurement::{MeasurementMode, TrainingKind, DEFAULT_CFO_HALF_RANGE};

pub const DEFAULT_TRIALS: usize = 500;
pub const FULL_TRIALS: usize = 5000;

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySpec {
    /// Nodes placed uniformly in a `side × side` square, linked within `comm_range`.
    Random { nodes: usize, side: f64, comm_range: f64 },
    /// Edge-list file (see [`crate::topology::EdgeList`]).
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub topology: TopologySpec,
    /// Draw a fresh random network for every trial (positions only; antenna
    /// counts stay as configured).
    pub resample_topology: bool,
    /// Seed of the fixed random network when `resample_topology` is off.
    pub topology_seed: Option<u64>,
    /// One entry per node, or a single entry applied to every node.
    pub antennas: Vec<usize>,
    pub snr_db: Vec<f64>,
    pub train_len: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub mode: MeasurementMode,
    pub max_iter: usize,
    pub eta: f64,
    /// Half-width of the uniform CFO draw, radians/sample.
    pub cfo_range: f64,
    pub training: TrainingKind,
    /// Largest iteration written to the MSE-vs-iteration table.
    pub report_iters: usize,
    pub consensus_iters: usize,
    pub out: PathBuf,
    /// Text the configuration was parsed from, if any.
    pub source: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            topology: TopologySpec::Random {
                nodes: 14,
                side: 100.0,
                comm_range: 38.0,
            },
            resample_topology: true,
            topology_seed: None,
            antennas: vec![2],
            snr_db: vec![30.0],
            train_len: vec![16],
            trials: DEFAULT_TRIALS,
            seed: 1,
            mode: MeasurementMode::FullSignal,
            max_iter: DEFAULT_MAX_ITER,
            eta: DEFAULT_ETA,
            cfo_range: DEFAULT_CFO_HALF_RANGE,
            training: TrainingKind::RandomPhase,
            report_iters: 20,
            consensus_iters: 1000,
            out: PathBuf::from("out"),
            source: None,
        }
    }
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_list<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| config_err(line, format!("bad value '{s}' for {key}"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("bad value '{value}' for {key}")))
}

fn parse_bool(value: &str, line: usize, key: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(config_err(line, format!("bad value '{value}' for {key}"))),
    }
}

pub fn parse_mode(value: &str) -> Option<MeasurementMode> {
    match value {
        "full" | "full-signal" => Some(MeasurementMode::FullSignal),
        "oracle" | "oracle-measurement" => Some(MeasurementMode::OracleMeasurement),
        _ => None,
    }
}

fn mode_name(mode: MeasurementMode) -> &'static str {
    match mode {
        MeasurementMode::FullSignal => "full",
        MeasurementMode::OracleMeasurement => "oracle",
    }
}

fn training_name(kind: TrainingKind) -> &'static str {
    match kind {
        TrainingKind::RandomPhase => "random",
        TrainingKind::CyclicShift => "cyclic",
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl ScenarioConfig {
    /// Parses config text. A relative `topology_file` is resolved against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut kind = "random".to_string();
        let mut file: Option<PathBuf> = None;
        let (mut nodes, mut side, mut range) = (14usize, 100.0f64, 38.0f64);

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected 'key = value'"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "topology" => kind = value.to_string(),
                "topology_file" => {
                    let p = PathBuf::from(value);
                    file = Some(match base {
                        Some(b) if p.is_relative() => b.join(p),
                        _ => p,
                    });
                }
                "nodes" => nodes = parse_one(value, line, key)?,
                "side" => side = parse_one(value, line, key)?,
                "comm_range" => range = parse_one(value, line, key)?,
                "resample_topology" => cfg.resample_topology = parse_bool(value, line, key)?,
                "topology_seed" => cfg.topology_seed = Some(parse_one(value, line, key)?),
                "antennas" => cfg.antennas = parse_list(value, line, key)?,
                "snr_db" => cfg.snr_db = parse_list(value, line, key)?,
                "train_len" => cfg.train_len = parse_list(value, line, key)?,
                "trials" => cfg.trials = parse_one(value, line, key)?,
                "seed" => cfg.seed = parse_one(value, line, key)?,
                "mode" => {
                    cfg.mode = parse_mode(value).ok_or_else(|| config_err(line, format!("unknown mode '{value}'")))?
                }
                "max_iter" => cfg.max_iter = parse_one(value, line, key)?,
                "eta" => cfg.eta = parse_one(value, line, key)?,
                "cfo_range" => cfg.cfo_range = parse_one(value, line, key)?,
                "training" => {
                    cfg.training = match value {
                        "random" => TrainingKind::RandomPhase,
                        "cyclic" => TrainingKind::CyclicShift,
                        _ => return Err(config_err(line, format!("unknown training '{value}'"))),
                    }
                }
                "report_iters" => cfg.report_iters = parse_one(value, line, key)?,
                "consensus_iters" => cfg.consensus_iters = parse_one(value, line, key)?,
                "out" => cfg.out = PathBuf::from(value),
                _ => return Err(config_err(line, format!("unknown key '{key}'"))),
            }
        }

        cfg.topology = match kind.as_str() {
            "random" => TopologySpec::Random {
                nodes,
                side,
                comm_range: range,
            },
            "file" => TopologySpec::File(
                file.ok_or_else(|| Error::Config("topology = file needs topology_file".into()))?,
            ),
            other => return Err(Error::Config(format!("unknown topology '{other}'"))),
        };
        cfg.source = Some(text.to_string());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr_db must be a non-empty list of numbers".into()));
        }
        if self.train_len.is_empty() {
            return Err(Error::Config("train_len must not be empty".into()));
        }
        if self.antennas.is_empty() || self.antennas.contains(&0) {
            return Err(Error::Config("antennas must be positive".into()));
        }
        let max_ant = *self.antennas.iter().max().expect("non-empty");
        if let Some(&n) = self.train_len.iter().find(|&&n| n <= max_ant) {
            return Err(Error::Config(format!("train_len {n} must exceed the antenna count {max_ant}")));
        }
        if let TopologySpec::Random { nodes, side, comm_range } = self.topology {
            if nodes < 2 || !(side > 0.0) || !(comm_range > 0.0) {
                return Err(Error::Config("random topology needs nodes >= 2, side > 0, comm_range > 0".into()));
            }
            if self.antennas.len() != 1 && self.antennas.len() != nodes {
                return Err(Error::Config(format!(
                    "antennas lists {} entries for {nodes} nodes",
                    self.antennas.len()
                )));
            }
        }
        if !(self.eta > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("eta and max_iter must be positive".into()));
        }
        if !(self.cfo_range >= 0.0) || self.cfo_range > std::f64::consts::PI {
            return Err(Error::Config("cfo_range must lie in [0, π]".into()));
        }
        Ok(())
    }

    /// Per-node antenna counts for a `nodes`-node network.
    pub fn antennas_for(&self, nodes: usize) -> Result<Vec<usize>> {
        match self.antennas.len() {
            1 => Ok(vec![self.antennas[0]; nodes]),
            n if n == nodes => Ok(self.antennas.clone()),
            n => Err(Error::Config(format!("antennas lists {n} entries for {nodes} nodes"))),
        }
    }

    /// Verbatim source, the fully resolved settings and the modelling
    /// assumptions, for the output directory.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        s.push_str("# ---- source ----\n");
        match &self.source {
            Some(src) => {
                s.push_str(src);
                if !src.ends_with('\n') {
                    s.push('\n');
                }
            }
            None => s.push_str("# (built-in defaults)\n"),
        }
        s.push_str("# ---- resolved ----\n");
        match &self.topology {
            TopologySpec::Random { nodes, side, comm_range } => {
                let _ = writeln!(s, "topology = random\nnodes = {nodes}\nside = {side}\ncomm_range = {comm_range}");
            }
            TopologySpec::File(p) => {
                let _ = writeln!(s, "topology = file\ntopology_file = {}", p.display());
            }
        }
        let _ = writeln!(s, "resample_topology = {}", self.resample_topology);
        if let Some(ts) = self.topology_seed {
            let _ = writeln!(s, "topology_seed = {ts}");
        }
        let _ = writeln!(s, "antennas = {}", join(&self.antennas));
        let _ = writeln!(s, "snr_db = {}", join(&self.snr_db));
        let _ = writeln!(s, "train_len = {}", join(&self.train_len));
        let _ = writeln!(s, "trials = {}", self.trials);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mode = {}", mode_name(self.mode));
        let _ = writeln!(s, "max_iter = {}", self.max_iter);
        let _ = writeln!(s, "eta = {:e}", self.eta);
        let _ = writeln!(s, "cfo_range = {}", self.cfo_range);
        let _ = writeln!(s, "training = {}", training_name(self.training));
        let _ = writeln!(s, "report_iters = {}", self.report_iters);
        let _ = writeln!(s, "consensus_iters = {}", self.consensus_iters);
        let _ = writeln!(s, "out = {}", self.out.display());
        s.push_str("# ---- assumptions ----\n");
        s.push_str("# SNR = 1/sigma^2 per receive antenna, unit power per transmit antenna, E|h|^2 = 1\n");
        s.push_str("# channels: i.i.d. Rayleigh CN(0,1), redrawn every trial\n");
        s.push_str("# resampled networks redraw node positions only; antenna counts are fixed\n");
        s.push_str("# link with ids a < b: node a transmits the training block\n");
        s.push_str("# CRB reference: centralized bound with every link bound at the true offsets and gains\n");
        s.push_str("# network averages exclude the reference node\n");
        s
    }
}
