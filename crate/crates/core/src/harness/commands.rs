//! Subcommand implementations, independent of argument parsing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, RunConfig};
use super::report::{render, run_rows, summarize, OracleRow, ReportRow, SummaryRow};
use super::trace::TraceFile;
use crate::allocation::BudgetLimits;
use crate::engine::{run_pipeline, PipelineRun, PolicyBundle, SnapshotSource};
use crate::error::{ensure, Result};
use crate::exec::Exec;
use crate::metrics::{
    evaluate, full_attention_rows, oracle_exhaustive_evict, output_loss_from_rows, theorem1_bound, value_norms,
    LossReport, ORACLE_CAP,
};
use crate::toymodel::{
    init_random_model, synthetic_inputs, synthetic_snapshot, ModelSnapshot, PrefillOptions, Prefiller,
};

fn prefill_options(policy: PolicyBundle) -> PrefillOptions {
    PrefillOptions { keep_full_attention: policy == PolicyBundle::H2o }
}

/// Builds the seeded toy model, prefills it and encodes the trace.
pub fn gen_trace(cfg: &RunConfig) -> Result<TraceFile> {
    let model = cfg.model_config();
    model.validate()?;
    model.validate_tokens(cfg.dims.tokens)?;
    TraceFile::from_snapshot(&synthetic_snapshot(&model, cfg.dims.tokens, PrefillOptions::default())?)
}

pub struct RunOutput {
    pub run: PipelineRun,
    pub report: LossReport,
    pub rows: Vec<ReportRow>,
}

/// Checks the invariants every run must satisfy.
fn audit(run: &PipelineRun, report: &LossReport, floor: usize, cache: usize) -> Result<()> {
    let total: usize = run.plan.per_layer.iter().sum();
    ensure!(total == run.config.budget, Invariant, "layer budgets sum to {total}, not {}", run.config.budget);
    for (l, layer) in run.layers.iter().enumerate() {
        let kept = layer.layer.cache.retained_count();
        ensure!(kept == run.plan.per_layer[l], Invariant, "layer {l} retains {kept} of budget {}", run.plan.per_layer[l]);
    }
    let peak = run.peak();
    ensure!(peak <= run.config.budget + cache, Invariant, "peak occupancy {peak} exceeds budget plus one layer");
    ensure!(run.plan.per_layer.iter().all(|&b| b >= floor), Invariant, "a layer budget is below the window floor");
    let bad = report.violations();
    ensure!(bad.is_empty(), Invariant, "measured loss exceeds the bound at layers {bad:?}");
    Ok(())
}

/// Runs one policy in synthetic or trace mode and audits the result.
pub fn run(cfg: &RunConfig, exec: Exec) -> Result<RunOutput> {
    let policy = cfg.policy;
    let (run, w_m, model) = match &cfg.mode {
        Mode::Synthetic => {
            cfg.validate()?;
            let model = cfg.model_config();
            let weights = init_random_model(&model)?;
            let inputs = synthetic_inputs(&model, cfg.dims.tokens);
            let mut source = Prefiller::new(&weights, inputs, prefill_options(policy))?;
            let run = run_pipeline(&mut source, &cfg.policy_config(), exec)?;
            (run, weights.w_m, model)
        }
        Mode::Trace(path) => {
            ensure!(
                policy != PolicyBundle::H2o,
                State,
                "{} needs the full attention matrix, which traces do not carry",
                policy.name()
            );
            let snapshot = TraceFile::read(path)?.to_snapshot()?;
            let model = snapshot.config.clone();
            let pc = policy.config(cfg.budget, model.window, &cfg.hyper);
            let run = run_pipeline(&mut SnapshotSource::new(&snapshot), &pc, exec)?;
            (run, snapshot.w_m, model)
        }
    };
    let report = evaluate(&run, &w_m, policy.name(), model.seed)?;
    let tokens = run.layers[0].layer.tokens();
    let limits = BudgetLimits::for_layer(model.kv_heads, model.window, tokens);
    audit(&run, &report, limits.floor, limits.cap)?;
    let rows = run_rows(&run, &report);
    Ok(RunOutput { run, report, rows })
}

pub struct OracleOutput {
    pub rows: Vec<OracleRow>,
    pub violations: usize,
}

/// Draws the total budget of an oracle instance when none is given.
fn instance_budget(seed: u64, layers: usize, limits: BudgetLimits) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random_range(layers * limits.floor..=layers * limits.cap)
}

/// Compares every policy against the exhaustive optimum, layer by layer,
/// on `instances` seeded models.
pub fn oracle(cfg: &RunConfig, budget: Option<usize>, instances: usize, exec: Exec) -> Result<OracleOutput> {
    let model = cfg.model_config();
    model.validate()?;
    model.validate_tokens(cfg.dims.tokens)?;
    let scored = model.kv_heads * (cfg.dims.tokens - model.window);
    ensure!(
        scored <= ORACLE_CAP,
        TooLarge,
        "H_kv x (N - w) = {scored} scored entries exceed the enumeration cap of {ORACLE_CAP}"
    );
    let limits = BudgetLimits::for_layer(model.kv_heads, model.window, cfg.dims.tokens);
    let mut rows = Vec::new();
    for instance in 0..instances {
        let seed = cfg.seed.wrapping_add(instance as u64);
        let mcfg = model.clone().with_seed(seed);
        let snapshot = synthetic_snapshot(&mcfg, cfg.dims.tokens, PrefillOptions { keep_full_attention: true })?;
        let total = budget.unwrap_or_else(|| instance_budget(seed, model.layers, limits));
        limits.check(total, model.layers)?;
        let attention: Vec<Vec<Vec<f64>>> = snapshot
            .layers
            .iter()
            .map(|l| full_attention_rows(&l.cache, &l.last_queries()))
            .collect::<Result<_>>()?;
        let mut optimum: HashMap<(usize, usize), f64> = HashMap::new();
        for policy in PolicyBundle::ALL {
            let pc = policy.config(total, model.window, &cfg.hyper);
            let run = run_pipeline(&mut SnapshotSource::new(&snapshot), &pc, exec)?;
            for (l, compressed) in run.layers.iter().enumerate() {
                let base = &snapshot.layers[l];
                let b = run.plan.per_layer[l];
                let mask = compressed.layer.cache.mask();
                let rows_l = &attention[l];
                let refs: Vec<&[f64]> = rows_l.iter().map(Vec::as_slice).collect();
                let greedy = output_loss_from_rows(rows_l, &base.cache, &mask, &base.w_o)?;
                let bound = theorem1_bound(&refs, &value_norms(&base.cache)?, &base.w_o, &mask)?;
                let best = match optimum.get(&(l, b)) {
                    Some(&v) => v,
                    None => {
                        let r = oracle_exhaustive_evict(&base.cache, &base.last_queries(), &base.w_o, b, exec)?;
                        optimum.insert((l, b), r.loss);
                        r.loss
                    }
                };
                rows.push(OracleRow {
                    instance,
                    seed,
                    layer: l,
                    policy: policy.name().to_string(),
                    budget_layer: b,
                    greedy_loss: greedy,
                    oracle_loss: best,
                    greedy_bound: bound,
                    gap: greedy - best,
                });
            }
        }
    }
    let violations = rows.iter().filter(|r| !r.sandwich_holds()).count();
    Ok(OracleOutput { rows, violations })
}

/// Reads run reports (CSV) and aggregates them per policy.
pub fn report<P: AsRef<Path>>(inputs: &[P]) -> Result<Vec<SummaryRow>> {
    ensure!(!inputs.is_empty(), Config, "report needs at least one input file");
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(super::report::read_run_rows(fs::File::open(path)?)?);
    }
    Ok(summarize(&rows))
}

/// Writes `bytes` to `out`, or stdout when no path is given.
pub fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    use std::io::Write;
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

/// Rendered run report.
pub fn run_report_bytes(cfg: &RunConfig, exec: Exec) -> Result<Vec<u8>> {
    render(&run(cfg, exec)?.rows, cfg.format)
}

/// Snapshot of a trace, or of the synthetic model when no trace is given.
pub fn load_snapshot(cfg: &RunConfig) -> Result<ModelSnapshot> {
    match &cfg.mode {
        Mode::Trace(path) => TraceFile::read(path)?.to_snapshot(),
        Mode::Synthetic => synthetic_snapshot(&cfg.model_config(), cfg.dims.tokens, prefill_options(cfg.policy)),
    }
}

