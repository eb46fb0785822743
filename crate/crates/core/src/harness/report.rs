//! Report tables.
//!
//! Run reports have the fixed column order
//! `layer, policy, budget_total, budget_layer, retained, true_l1_loss,
//! theorem1_bound, adakv_bound, entropy_e, logit_ce`: one row per layer and
//! a final row with `layer = model` carrying only `logit_ce`. Empty CSV
//! cells (JSON `null`) mark columns that do not apply to a row.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::config::ReportFormat;
use crate::engine::PipelineRun;
use crate::error::Result;
use crate::metrics::LossReport;

pub const RUN_COLUMNS: [&str; 10] = [
    "layer",
    "policy",
    "budget_total",
    "budget_layer",
    "retained",
    "true_l1_loss",
    "theorem1_bound",
    "adakv_bound",
    "entropy_e",
    "logit_ce",
];

pub const MODEL_ROW: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub policy: String,
    pub budget_total: usize,
    pub budget_layer: Option<usize>,
    pub retained: Option<usize>,
    pub true_l1_loss: Option<f64>,
    pub theorem1_bound: Option<f64>,
    pub adakv_bound: Option<f64>,
    pub entropy_e: Option<f64>,
    pub logit_ce: Option<f64>,
}

impl ReportRow {
    pub fn is_model_row(&self) -> bool {
        self.layer == MODEL_ROW
    }
}

/// Rows of one run: per-layer losses followed by the model row.
pub fn run_rows(run: &PipelineRun, report: &LossReport) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = run
        .layers
        .iter()
        .zip(&report.layers)
        .zip(&run.plan.per_layer)
        .map(|((layer, loss), &budget)| ReportRow {
            layer: loss.layer.to_string(),
            policy: report.policy.clone(),
            budget_total: report.budget,
            budget_layer: Some(budget),
            retained: Some(layer.layer.cache.retained_count()),
            true_l1_loss: Some(loss.true_l1_loss),
            theorem1_bound: Some(loss.theorem1_bound),
            adakv_bound: Some(loss.adakv_bound),
            entropy_e: Some(layer.entropy),
            logit_ce: None,
        })
        .collect();
    rows.push(ReportRow {
        layer: MODEL_ROW.to_string(),
        policy: report.policy.clone(),
        budget_total: report.budget,
        budget_layer: None,
        retained: None,
        true_l1_loss: None,
        theorem1_bound: None,
        adakv_bound: None,
        entropy_e: None,
        logit_ce: Some(report.logit_ce),
    });
    rows
}

/// Serializes any row type as CSV (with header) or a JSON array.
pub fn render<T: Serialize>(rows: &[T], format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(w.into_inner().map_err(|e| e.into_error())?)
        }
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(rows)?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

pub fn read_run_rows<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?)
}

/// One line of the oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub instance: usize,
    pub seed: u64,
    pub layer: usize,
    pub policy: String,
    pub budget_layer: usize,
    pub greedy_loss: f64,
    pub oracle_loss: f64,
    pub greedy_bound: f64,
    pub gap: f64,
}

impl OracleRow {
    /// `oracle ≤ greedy ≤ bound`, the bound with rounding slack.
    pub fn sandwich_holds(&self) -> bool {
        self.oracle_loss <= self.greedy_loss && self.greedy_loss <= self.greedy_bound * (1.0 + 1e-9) + 1e-12
    }
}

/// Per-policy means over any number of run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub runs: usize,
    pub layers: usize,
    pub mean_true_l1_loss: f64,
    pub mean_theorem1_bound: f64,
    pub mean_adakv_bound: f64,
    pub mean_entropy_e: f64,
    pub mean_logit_ce: f64,
}

#[derive(Default)]
struct Acc {
    runs: usize,
    layers: usize,
    loss: f64,
    t1: f64,
    ada: f64,
    e: f64,
    ce: f64,
}

/// Aggregates run rows by policy, sorted by policy name.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut by: BTreeMap<&str, Acc> = BTreeMap::new();
    for row in rows {
        let acc = by.entry(row.policy.as_str()).or_default();
        if row.is_model_row() {
            acc.runs += 1;
            acc.ce += row.logit_ce.unwrap_or(0.0);
        } else {
            acc.layers += 1;
            acc.loss += row.true_l1_loss.unwrap_or(0.0);
            acc.t1 += row.theorem1_bound.unwrap_or(0.0);
            acc.ada += row.adakv_bound.unwrap_or(0.0);
            acc.e += row.entropy_e.unwrap_or(0.0);
        }
    }
    let mean = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    by.into_iter()
        .map(|(policy, a)| SummaryRow {
            policy: policy.to_string(),
            runs: a.runs,
            layers: a.layers,
            mean_true_l1_loss: mean(a.loss, a.layers),
            mean_theorem1_bound: mean(a.t1, a.layers),
            mean_adakv_bound: mean(a.ada, a.layers),
            mean_entropy_e: mean(a.e, a.layers),
            mean_logit_ce: mean(a.ce, a.runs),
        })
        .collect()
}
