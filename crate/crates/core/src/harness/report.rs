//! Aggregation of trial records into result tables and the frozen CSV schemas.
//!
//! | file | header |
//! |------|--------|
//! | `mse_vs_iter.csv` | `snr_db,node,iter,mse,crb` |
//! | `mse_vs_snr.csv` | `snr_db,train_len,mse_avg,crb_avg` |
//! | `crb_vs_snr.csv` | `snr_db,train_len,crb_avg` |
//! | `consensus_vs_bp.csv` | `snr_db,iter,mse_bp,mse_consensus` |
//! | `crb.csv` | `snr_db,train_len,node,antenna,crb` |
//!
//! `node` is a 1-based id or `avg` (network average over non-reference
//! nodes). MSE and CRB values are sums over a node's antennas.

use std::fmt::{self, Write as _};

use super::trial::TrialRecord;
use crate::error::{Error, Result};
use crate::topology::NodeId;

pub const MSE_VS_ITER_HEADER: &str = "snr_db,node,iter,mse,crb";
pub const MSE_VS_SNR_HEADER: &str = "snr_db,train_len,mse_avg,crb_avg";
pub const CRB_VS_SNR_HEADER: &str = "snr_db,train_len,crb_avg";
pub const CONSENSUS_VS_BP_HEADER: &str = "snr_db,iter,mse_bp,mse_consensus";
pub const CRB_HEADER: &str = "snr_db,train_len,node,antenna,crb";

/// Per-trial numbers needed for aggregation, so full trajectories need not be
/// kept around.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub snr_db: f64,
    pub train_len: usize,
    pub reference: NodeId,
    /// `sq_err[node][l]` for `l = 0..=report_iters`.
    pub sq_err: Vec<Vec<f64>>,
    pub final_sq_err: Vec<f64>,
    pub crb_trace: Vec<f64>,
    pub converged: bool,
    pub iterations_run: usize,
    pub ml_invocations: usize,
    pub ml_warnings: usize,
}

impl TrialSummary {
    pub fn from_record(rec: &TrialRecord, report_iters: usize) -> Self {
        let k = rec.graph.num_nodes();
        Self {
            snr_db: rec.snr_db,
            train_len: rec.train_len,
            reference: rec.graph.reference(),
            sq_err: (0..k)
                .map(|i| (0..=report_iters).map(|l| rec.squared_error(i, l)).collect())
                .collect(),
            final_sq_err: (0..k).map(|i| rec.final_squared_error(i)).collect(),
            crb_trace: rec.crb_trace.clone(),
            converged: rec.trajectory.converged,
            iterations_run: rec.trajectory.iterations_run,
            ml_invocations: rec.ml_invocations,
            ml_warnings: rec.ml_warnings,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeLabel {
    Node(NodeId),
    Avg,
}

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeLabel::Node(i) => write!(f, "{}", i + 1),
            NodeLabel::Avg => f.write_str("avg"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub snr_db: f64,
    pub train_len: usize,
    /// `None` for the final (converged) estimate.
    pub iteration: Option<usize>,
    pub node: NodeLabel,
    pub mse: f64,
    pub crb: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Groups summaries by operating point (first-seen order) and averages over
/// trials. Every group gets per-node and network-average rows for each
/// reported iteration plus the final estimate.
pub fn aggregate(summaries: &[TrialSummary]) -> Result<ResultTable> {
    if summaries.is_empty() {
        return Err(Error::InvalidInput("no trials to aggregate".into()));
    }
    let mut groups: Vec<((u64, usize), Vec<&TrialSummary>)> = Vec::new();
    for s in summaries {
        let key = (s.snr_db.to_bits(), s.train_len);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(s),
            None => groups.push((key, vec![s])),
        }
    }
    let mut table = ResultTable::default();
    for (_, group) in groups {
        let first = group[0];
        let k = first.sq_err.len();
        let iters = first.sq_err[0].len();
        if group.iter().any(|s| s.sq_err.len() != k || s.reference != first.reference) {
            return Err(Error::InvalidInput("trials of one operating point differ in network size".into()));
        }
        let nodes: Vec<NodeId> = (0..k).filter(|&i| i != first.reference).collect();
        let trials = group.len();
        let crb: Vec<f64> = (0..k).map(|i| mean(group.iter().map(|s| s.crb_trace[i]))).collect();
        let crb_avg = mean(nodes.iter().map(|&i| crb[i]));
        let row = |iteration, node, mse, crb| ResultRow {
            snr_db: first.snr_db,
            train_len: first.train_len,
            iteration,
            node,
            mse,
            crb,
            trials,
        };
        for l in (0..iters).map(Some).chain([None]) {
            let per_node: Vec<f64> = nodes
                .iter()
                .map(|&i| {
                    mean(group.iter().map(|s| match l {
                        Some(l) => s.sq_err[i][l],
                        None => s.final_sq_err[i],
                    }))
                })
                .collect();
            for (&i, &m) in nodes.iter().zip(&per_node) {
                table.rows.push(row(l, NodeLabel::Node(i), m, crb[i]));
            }
            table.rows.push(row(l, NodeLabel::Avg, mean(per_node.iter().copied()), crb_avg));
        }
    }
    Ok(table)
}

impl ResultTable {
    /// Training lengths present, in first-seen order.
    pub fn train_lens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.train_len) {
                out.push(r.train_len);
            }
        }
        out
    }

    /// `mse_vs_iter.csv` rows for one training length.
    pub fn mse_vs_iter_csv(&self, train_len: usize) -> String {
        let mut out = format!("{MSE_VS_ITER_HEADER}\n");
        for r in self.rows.iter().filter(|r| r.train_len == train_len) {
            if let Some(l) = r.iteration {
                let _ = writeln!(out, "{},{},{},{:e},{:e}", r.snr_db, r.node, l, r.mse, r.crb);
            }
        }
        out
    }

    fn final_avg(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows
            .iter()
            .filter(|r| r.iteration.is_none() && r.node == NodeLabel::Avg)
    }

    pub fn mse_vs_snr_csv(&self) -> String {
        let mut out = format!("{MSE_VS_SNR_HEADER}\n");
        for r in self.final_avg() {
            let _ = writeln!(out, "{},{},{:e},{:e}", r.snr_db, r.train_len, r.mse, r.crb);
        }
        out
    }

    pub fn crb_vs_snr_csv(&self) -> String {
        let mut out = format!("{CRB_VS_SNR_HEADER}\n");
        for r in self.final_avg() {
            let _ = writeln!(out, "{},{},{:e}", r.snr_db, r.train_len, r.crb);
        }
        out
    }

    pub fn find(&self, snr_db: f64, train_len: usize, iteration: Option<usize>, node: NodeLabel) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.snr_db == snr_db && r.train_len == train_len && r.iteration == iteration && r.node == node
        })
    }
}

/// BP and consensus network MSE against iteration at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSeries {
    pub snr_db: f64,
    pub mse_bp: Vec<f64>,
    pub mse_consensus: Vec<f64>,
}

pub fn consensus_vs_bp_csv(series: &[ComparisonSeries]) -> String {
    let mut out = format!("{CONSENSUS_VS_BP_HEADER}\n");
    for s in series {
        for (l, (b, c)) in s.mse_bp.iter().zip(&s.mse_consensus).enumerate() {
            let _ = writeln!(out, "{},{},{:e},{:e}", s.snr_db, l, b, c);
        }
    }
    out
}

/// Trial-averaged diagonal of the centralized bound.
#[derive(Debug, Clone, PartialEq)]
pub struct CrbEntry {
    pub snr_db: f64,
    pub train_len: usize,
    pub node: NodeId,
    pub antenna: usize,
    pub crb: f64,
}

pub fn crb_csv(entries: &[CrbEntry]) -> String {
    let mut out = format!("{CRB_HEADER}\n");
    for e in entries {
        let _ = writeln!(out, "{},{},{},{},{:e}", e.snr_db, e.train_len, e.node + 1, e.antenna + 1, e.crb);
    }
    out
}
