//! Experiment configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::engine::{Hyper, PolicyBundle, PolicyConfig};
use crate::error::{ensure, Error, Result};
use crate::toymodel::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Build the seeded toy model and prefill it in process.
    Synthetic,
    /// Replay a trace file.
    Trace(PathBuf),
}

/// Dimensions of the synthetic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub tokens: usize,
    pub vocab: usize,
    pub value_spread: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { layers: 2, heads: 4, kv_heads: 2, head_dim: 8, tokens: 64, vocab: 32, value_spread: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub policy: PolicyBundle,
    pub budget: usize,
    pub window: usize,
    pub hyper: Hyper,
    pub seed: u64,
    pub dims: ModelDims,
    pub mode: Mode,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let d = &self.dims;
        ModelConfig::new(d.layers, d.heads, d.kv_heads, d.head_dim, self.window)
            .with_seed(self.seed)
            .with_vocab(d.vocab)
            .with_value_spread(d.value_spread)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        self.policy.config(self.budget, self.window, &self.hyper)
    }

    /// Checks dimensions, hyperparameters and budget feasibility.
    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        model.validate_tokens(self.dims.tokens)?;
        ensure!(self.hyper.beta >= 1.0, Config, "beta must be at least 1, got {}", self.hyper.beta);
        ensure!(self.hyper.gamma >= 0.0, Config, "gamma must be non-negative, got {}", self.hyper.gamma);
        self.policy_config().validate(&model, self.dims.tokens)
    }
}
