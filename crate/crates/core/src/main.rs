//! `cfo-bp` command line: Monte-Carlo runs of distributed CFO estimation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfo_bp::harness::{self, config, Scenario, ScenarioConfig, TopologySpec};
use cfo_bp::Error;

#[derive(Debug, Parser)]
#[command(name = "cfo-bp", version, about = "Distributed CFO estimation by Gaussian belief propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo trials per operating point
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Link measurement mode
    #[arg(long, value_parser = ["full", "oracle"])]
    mode: Option<String>,
    /// Use 5000 trials per operating point
    #[arg(long, conflicts_with = "trials")]
    full_trials: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-node MSE vs iteration and network MSE vs SNR, with CRB references
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// BP against the average-consensus baseline (single-antenna nodes)
    CompareConsensus {
        #[command(flatten)]
        common: Common,
    },
    /// Trial-averaged centralized CRB diagonal for one topology
    Crb {
        #[command(flatten)]
        common: Common,
        /// Edge-list file; overrides the config topology
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        train_len: Option<usize>,
        /// Antennas per node
        #[arg(long)]
        antennas: Option<usize>,
    },
    /// Full BP trajectory of one trial
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
}

/// Single-antenna defaults of the consensus comparison when no file is given.
fn consensus_defaults() -> ScenarioConfig {
    ScenarioConfig {
        antennas: vec![1],
        snr_db: vec![5.0, 15.0, 25.0],
        ..ScenarioConfig::default()
    }
}

fn load(common: &Common, defaults: fn() -> ScenarioConfig) -> Result<ScenarioConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::from_file(p)?,
        None => defaults(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if common.full_trials {
        cfg.trials = config::FULL_TRIALS;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &common.mode {
        cfg.mode = config::parse_mode(m).expect("validated by clap");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Parse { .. } | Error::InvalidGraph(_))
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { common } => {
            let scenario = Scenario::new(load(&common, ScenarioConfig::default)?)?;
            let out = harness::simulate(&scenario)?;
            let cfg = &scenario.config;
            for r in out
                .table
                .rows
                .iter()
                .filter(|r| r.iteration.is_none() && r.node == harness::NodeLabel::Avg)
            {
                println!(
                    "snr_db={} train_len={} mse_avg={:.4e} crb_avg={:.4e} ratio={:.3}",
                    r.snr_db,
                    r.train_len,
                    r.mse,
                    r.crb,
                    r.mse / r.crb
                );
            }
            println!(
                "trials={} bp_unconverged={} ml_runs={} ml_fallbacks={}",
                out.summaries.len(),
                out.unconverged(),
                out.ml_invocations(),
                out.ml_warnings()
            );
            print_files(&harness::write_simulation(&cfg.out, cfg, &out)?);
        }
        Command::CompareConsensus { common } => {
            let scenario = Scenario::new(load(&common, consensus_defaults)?)?;
            let series = harness::compare_consensus(&scenario)?;
            for s in &series {
                let fmt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |n| n.to_string());
                println!(
                    "snr_db={} bp_settle={} consensus_settle={} mse_bp_final={:.4e} mse_consensus_final={:.4e}",
                    s.snr_db,
                    fmt(s.bp_settle()),
                    fmt(s.consensus_settle()),
                    s.mse_bp.last().copied().unwrap_or(f64::NAN),
                    s.mse_consensus.last().copied().unwrap_or(f64::NAN),
                );
            }
            let cfg = &scenario.config;
            print_files(&harness::write_comparison(&cfg.out, cfg, &series)?);
        }
        Command::Crb {
            common,
            topology,
            snr,
            train_len,
            antennas,
        } => {
            let mut cfg = load(&common, ScenarioConfig::default)?;
            if let Some(t) = topology {
                cfg.topology = TopologySpec::File(t);
            }
            if let Some(s) = snr {
                cfg.snr_db = vec![s];
            }
            if let Some(n) = train_len {
                cfg.train_len = vec![n];
            }
            if let Some(a) = antennas {
                cfg.antennas = vec![a];
            }
            // the bound needs no estimator, so do not impose its training-length limit
            cfg.mode = cfo_bp::measurement::MeasurementMode::OracleMeasurement;
            cfg.validate()?;
            let scenario = Scenario::new(cfg)?;
            let cfg = &scenario.config;
            let mut entries = Vec::new();
            for &n in &cfg.train_len {
                for &s in &cfg.snr_db {
                    entries.extend(harness::average_crb(&scenario, s, n)?);
                }
            }
            print!("{}", harness::report::crb_csv(&entries));
            print_files(&harness::write_crb(&cfg.out, cfg, &entries)?);
        }
        Command::Trace { common, trial } => {
            let scenario = Scenario::new(load(&common, ScenarioConfig::default)?)?;
            let cfg = &scenario.config;
            let csv = harness::trace(&scenario, trial)?;
            print_files(&harness::write_trace(&cfg.out, cfg, &csv)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}
