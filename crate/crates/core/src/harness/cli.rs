//! Argument parsing and dispatch for the `kvlab` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::commands;
use super::config::{ModelDims, Mode, ReportFormat, RunConfig};
use super::report::render;
use crate::engine::{Hyper, PolicyBundle};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Parser)]
#[command(name = "kvlab", version, about = "KV cache eviction laboratory on a seeded toy decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prefill the seeded model and write a trace file to --out.
    GenTrace(CommonArgs),
    /// Compress with one policy and report per-layer losses.
    Run(CommonArgs),
    /// Compare every policy with the exhaustive optimum on small instances.
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of seeded instances (seeds --seed, --seed + 1, ...).
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
    /// Aggregate run reports (CSV) into a per-policy summary.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
        format: String,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// lava, snapkv, ada-snapkv, pyramidkv, ada-pyramidkv, cake, tova, h2o, vatp
    #[arg(long, default_value = "lava")]
    pub policy: String,
    /// Total retained entries over all layers and kv-heads.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub window: usize,
    /// Max-pooling kernel (odd; 1 disables pooling).
    #[arg(long, default_value_t = 7)]
    pub kernel: usize,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 8)]
    pub dh: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    /// Spread of per-head value scales (1 keeps the plain initialization).
    #[arg(long, default_value_t = 1.0)]
    pub value_spread: f64,
    /// Replay this trace instead of building the synthetic model.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    pub format: String,
}

impl CommonArgs {
    pub fn to_config(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            policy: self.policy.parse::<PolicyBundle>()?,
            budget: self.budget.unwrap_or(0),
            window: self.window,
            hyper: Hyper {
                kernel: self.kernel,
                beta: self.beta,
                gamma: self.gamma,
                gamma1: self.gamma1,
                gamma2: self.gamma2,
            },
            seed: self.seed,
            dims: ModelDims {
                layers: self.layers,
                heads: self.heads,
                kv_heads: self.kv_heads,
                head_dim: self.dh,
                tokens: self.tokens,
                vocab: self.vocab,
                value_spread: self.value_spread,
            },
            mode: self.trace.clone().map_or(Mode::Synthetic, Mode::Trace),
            out: self.out.clone(),
            format: self.format.parse::<ReportFormat>()?,
        })
    }
}

/// Executes a parsed command, writing its output.
pub fn execute(cli: Cli, exec: Exec) -> Result<()> {
    match cli.command {
        Command::GenTrace(args) => {
            let cfg = args.to_config()?;
            let out = cfg.out.clone().ok_or_else(|| Error::Config("gen-trace needs --out".into()))?;
            commands::gen_trace(&cfg)?.write(&out)
        }
        Command::Run(args) => {
            let cfg = args.to_config()?;
            if args.budget.is_none() {
                return Err(Error::Config("run needs --budget".into()));
            }
            let bytes = commands::run_report_bytes(&cfg, exec)?;
            commands::emit(&bytes, cfg.out.as_deref())
        }
        Command::Oracle { common, instances } => {
            let cfg = common.to_config()?;
            if cfg.mode != Mode::Synthetic {
                return Err(Error::Config("oracle builds its own instances; --trace is not accepted".into()));
            }
            let out = commands::oracle(&cfg, common.budget, instances, exec)?;
            commands::emit(&render(&out.rows, cfg.format)?, cfg.out.as_deref())?;
            if out.violations > 0 {
                return Err(Error::Invariant(format!("{} rows break oracle <= greedy <= bound", out.violations)));
            }
            Ok(())
        }
        Command::Report { inputs, out, format } => {
            let rows = commands::report(&inputs)?;
            commands::emit(&render(&rows, format.parse()?)?, out.as_deref())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, Exec::default()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("kvlab: {e}");
            e.exit_code()
        }
    }
}
