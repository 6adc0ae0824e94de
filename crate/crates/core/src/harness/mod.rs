//! Monte-Carlo experiment driver: scenario configs, seeded trials, result
//! tables and CSV output.
//!
//! Trials run on the rayon pool; results are collected in trial order and
//! reduced on one thread, so output is identical for any thread count.

pub mod config;
pub mod report;
pub mod trial;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::baseline::{
    mse_bp, mse_consensus, run_consensus, settling_iteration, trace_from_bp, trace_from_consensus, ConsensusConfig,
};
use crate::error::{Error, Result};
use crate::measurement::MeasurementMode;
use crate::seed;

pub use config::{ScenarioConfig, TopologySpec};
pub use report::{aggregate, ComparisonSeries, CrbEntry, NodeLabel, ResultRow, ResultTable, TrialSummary};
pub use trial::{run_trial, Scenario, TrialRecord};

/// Relative band used for "reached its final value".
pub const SETTLE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub table: ResultTable,
    pub summaries: Vec<TrialSummary>,
}

impl SimulationOutput {
    pub fn ml_invocations(&self) -> usize {
        self.summaries.iter().map(|s| s.ml_invocations).sum()
    }

    pub fn ml_warnings(&self) -> usize {
        self.summaries.iter().map(|s| s.ml_warnings).sum()
    }

    pub fn unconverged(&self) -> usize {
        self.summaries.iter().filter(|s| !s.converged).count()
    }
}

/// Every trial at every `(train_len, snr_db)` operating point.
pub fn simulate(scenario: &Scenario) -> Result<SimulationOutput> {
    let cfg = &scenario.config;
    let mut summaries = Vec::with_capacity(cfg.trials * cfg.snr_db.len() * cfg.train_len.len());
    for &n in &cfg.train_len {
        for &snr in &cfg.snr_db {
            let batch: Vec<TrialSummary> = (0..cfg.trials)
                .into_par_iter()
                .map(|i| run_trial(scenario, snr, n, i).map(|r| TrialSummary::from_record(&r, cfg.report_iters)))
                .collect::<Result<_>>()?;
            summaries.extend(batch);
        }
    }
    Ok(SimulationOutput {
        table: aggregate(&summaries)?,
        summaries,
    })
}

/// Per-trial `(BP, consensus)` MSE series.
type MsePair = (Vec<f64>, Vec<f64>);

/// BP against the consensus baseline on single-antenna networks, one series
/// per SNR over `0..=consensus_iters`. Consensus starts from the true
/// offsets and receives fresh measurements at the single-antenna link bound
/// every iteration.
pub fn compare_consensus(scenario: &Scenario) -> Result<Vec<ComparisonSeries>> {
    let cfg = &scenario.config;
    if cfg.antennas.iter().any(|&a| a != 1) {
        return Err(Error::Config("compare-consensus needs antennas = 1".into()));
    }
    let n = cfg.train_len[0];
    let iters = cfg.consensus_iters;
    cfg.snr_db
        .iter()
        .map(|&snr| {
            let noise = ConsensusConfig::at_snr(snr, n)?;
            let per_trial: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.trials)
                .into_par_iter()
                .map(|i| {
                    let rec = run_trial(scenario, snr, n, i)?;
                    let bp = mse_bp(
                        &[trace_from_bp(&rec.trajectory, iters)],
                        std::slice::from_ref(&rec.truth),
                        rec.graph.reference(),
                    );
                    let init: Vec<f64> = rec.truth.iter().map(|w| w[0]).collect();
                    let mut rng = seed::stream(cfg.seed, "consensus", &[i as u64, snr.to_bits()]);
                    let states = run_consensus(init, &rec.graph, &noise, iters, &mut rng)?;
                    let cons = mse_consensus(&[trace_from_consensus(&states)]);
                    Ok((bp, cons))
                })
                .collect::<Result<_>>()?;
            let average = |pick: fn(&MsePair) -> &Vec<f64>| -> Vec<f64> {
                let mut acc = vec![0.0; iters + 1];
                for t in &per_trial {
                    for (a, v) in acc.iter_mut().zip(pick(t)) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / per_trial.len() as f64).collect()
            };
            Ok(ComparisonSeries {
                snr_db: snr,
                mse_bp: average(|t| &t.0),
                mse_consensus: average(|t| &t.1),
            })
        })
        .collect()
}

impl ComparisonSeries {
    pub fn bp_settle(&self) -> Option<usize> {
        settling_iteration(&self.mse_bp, SETTLE_TOLERANCE)
    }

    pub fn consensus_settle(&self) -> Option<usize> {
        settling_iteration(&self.mse_consensus, SETTLE_TOLERANCE)
    }
}

/// Trial-averaged diagonal of the centralized bound at one operating point.
/// Only the network and channel draws matter, so measurements are drawn in
/// oracle mode and no estimator runs.
pub fn average_crb(scenario: &Scenario, snr_db: f64, train_len: usize) -> Result<Vec<CrbEntry>> {
    let mut cheap = scenario.clone();
    cheap.config.mode = MeasurementMode::OracleMeasurement;
    let trials = cheap.config.trials;
    let diags: Vec<Vec<(usize, usize, f64)>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let rec = run_trial(&cheap, snr_db, train_len, i)?;
            let g = &rec.graph;
            let mut out = Vec::new();
            let mut row = 0;
            for node in (0..g.num_nodes()).filter(|&n| n != g.reference()) {
                for a in 0..g.antennas(node) {
                    out.push((node, a, rec.crb[(row, row)]));
                    row += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut entries: Vec<CrbEntry> = diags[0]
        .iter()
        .map(|&(node, antenna, _)| CrbEntry {
            snr_db,
            train_len,
            node,
            antenna,
            crb: 0.0,
        })
        .collect();
    for d in &diags {
        if d.len() != entries.len() {
            return Err(Error::InvalidInput("network size changed between trials".into()));
        }
        for (e, &(_, _, v)) in entries.iter_mut().zip(d) {
            e.crb += v / trials as f64;
        }
    }
    Ok(entries)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

pub fn write_config_echo(dir: &Path, config: &ScenarioConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write(dir, "config_echo.txt", &config.echo())
}

/// Writes `mse_vs_iter.csv` (or `mse_vs_iter_n<N>.csv` for several training
/// lengths), `mse_vs_snr.csv`, `crb_vs_snr.csv` and the config echo.
pub fn write_simulation(dir: &Path, config: &ScenarioConfig, output: &SimulationOutput) -> Result<Vec<PathBuf>> {
    let mut files = vec![write_config_echo(dir, config)?];
    let lens = output.table.train_lens();
    for &n in &lens {
        let name = if lens.len() == 1 {
            "mse_vs_iter.csv".to_string()
        } else {
            format!("mse_vs_iter_n{n}.csv")
        };
        files.push(write(dir, &name, &output.table.mse_vs_iter_csv(n))?);
    }
    files.push(write(dir, "mse_vs_snr.csv", &output.table.mse_vs_snr_csv())?);
    files.push(write(dir, "crb_vs_snr.csv", &output.table.crb_vs_snr_csv())?);
    Ok(files)
}

pub fn write_comparison(dir: &Path, config: &ScenarioConfig, series: &[ComparisonSeries]) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write_config_echo(dir, config)?,
        write(dir, "consensus_vs_bp.csv", &report::consensus_vs_bp_csv(series))?,
    ])
}

pub fn write_crb(dir: &Path, config: &ScenarioConfig, entries: &[CrbEntry]) -> Result<Vec<PathBuf>> {
    Ok(vec![write_config_echo(dir, config)?, write(dir, "crb.csv", &report::crb_csv(entries))?])
}

/// Full BP trajectory of one trial at the first configured operating point.
pub fn trace(scenario: &Scenario, index: usize) -> Result<String> {
    let cfg = &scenario.config;
    let rec = run_trial(scenario, cfg.snr_db[0], cfg.train_len[0], index)?;
    Ok(rec.trajectory.to_csv(rec.graph.max_antennas()))
}

pub fn write_trace(dir: &Path, config: &ScenarioConfig, csv: &str) -> Result<Vec<PathBuf>> {
    Ok(vec![write_config_echo(dir, config)?, write(dir, "trace.csv", csv)?])
}
