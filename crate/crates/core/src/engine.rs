//! Eviction and the layer-by-layer compression pipeline.

use std::fmt;
use std::str::FromStr;

use crate::allocation::{
    apportion, cake_layer_budgets, cake_spatial, cake_temporal, entropy_layer_budgets, lava_layer_entropy,
    lava_normalized_scores, BudgetLimits, LayerAllocation,
};
use crate::cache::{BudgetPlan, EvictionMask, LayerKVCache};
use crate::error::{ensure, Error, Result};
use crate::exec::Exec;
use crate::numerics::top_k_indices;
use crate::scoring::{
    cake_score, gqa_reduce_max, h2o_score, lava_score, pool_scores, snapkv_score, tova_score, value_norm_max,
    vatp_score, ScoreTensor, ScoringPolicy,
};
use crate::toymodel::{ModelConfig, ModelSnapshot, PrefilledLayer, Prefiller};

/// Default max-pooling kernel.
pub const DEFAULT_KERNEL: usize = 7;

/// How a layer budget is split over kv-heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadBudgetMode {
    /// Equal shares per head.
    Fixed,
    /// Joint top-k across the heads of a layer.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub scoring: ScoringPolicy,
    pub allocation: LayerAllocation,
    pub heads: HeadBudgetMode,
    pub budget: usize,
    pub window: usize,
    /// Pooling kernel for window-based scores; 1 disables pooling.
    pub kernel: usize,
}

impl PolicyConfig {
    /// Whether the scores are max-pooled (window-based scores only).
    pub fn pools(&self) -> bool {
        self.kernel > 1 && !matches!(self.scoring, ScoringPolicy::Tova | ScoringPolicy::H2o)
    }

    pub fn validate(&self, model: &ModelConfig, tokens: usize) -> Result<()> {
        ensure!(
            self.window == model.window,
            Config,
            "policy window {} differs from model window {}",
            self.window,
            model.window
        );
        ensure!(self.kernel >= 1 && self.kernel % 2 == 1, Config, "pooling kernel must be odd, got {}", self.kernel);
        if let ScoringPolicy::Cake { gamma } = self.scoring {
            ensure!(gamma >= 0.0, Config, "cake gamma must be non-negative");
        }
        match self.allocation {
            LayerAllocation::Pyramid { beta } => ensure!(beta >= 1.0, Config, "pyramid beta must be at least 1"),
            LayerAllocation::Cake { gamma1, gamma2 } => {
                ensure!(gamma1 != 0.0 && gamma2 != 0.0, Config, "cake gammas must be non-zero")
            }
            _ => {}
        }
        BudgetLimits::for_layer(model.kv_heads, model.window, tokens).check(self.budget, model.layers)
    }
}

/// Hyperparameters shared by the named bundles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub kernel: usize,
    pub beta: f64,
    pub gamma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { kernel: DEFAULT_KERNEL, beta: 2.0, gamma: 1.0, gamma1: 1.0, gamma2: 1.0 }
    }
}

/// Named policy bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyBundle {
    Lava,
    SnapKv,
    AdaSnapKv,
    PyramidKv,
    AdaPyramidKv,
    Cake,
    Tova,
    H2o,
    Vatp,
}

impl PolicyBundle {
    pub const ALL: [PolicyBundle; 9] = [
        PolicyBundle::Lava,
        PolicyBundle::SnapKv,
        PolicyBundle::AdaSnapKv,
        PolicyBundle::PyramidKv,
        PolicyBundle::AdaPyramidKv,
        PolicyBundle::Cake,
        PolicyBundle::Tova,
        PolicyBundle::H2o,
        PolicyBundle::Vatp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyBundle::Lava => "lava",
            PolicyBundle::SnapKv => "snapkv",
            PolicyBundle::AdaSnapKv => "ada-snapkv",
            PolicyBundle::PyramidKv => "pyramidkv",
            PolicyBundle::AdaPyramidKv => "ada-pyramidkv",
            PolicyBundle::Cake => "cake",
            PolicyBundle::Tova => "tova",
            PolicyBundle::H2o => "h2o",
            PolicyBundle::Vatp => "vatp",
        }
    }

    pub fn config(self, budget: usize, window: usize, hyper: &Hyper) -> PolicyConfig {
        use HeadBudgetMode::{Dynamic, Fixed};
        let pyramid = LayerAllocation::Pyramid { beta: hyper.beta };
        let (scoring, allocation, heads) = match self {
            PolicyBundle::Lava => (ScoringPolicy::Lava, LayerAllocation::LavaEntropy, Dynamic),
            PolicyBundle::SnapKv => (ScoringPolicy::SnapKv, LayerAllocation::Uniform, Fixed),
            PolicyBundle::AdaSnapKv => (ScoringPolicy::SnapKv, LayerAllocation::Uniform, Dynamic),
            PolicyBundle::PyramidKv => (ScoringPolicy::SnapKv, pyramid, Fixed),
            PolicyBundle::AdaPyramidKv => (ScoringPolicy::SnapKv, pyramid, Dynamic),
            PolicyBundle::Cake => (
                ScoringPolicy::Cake { gamma: hyper.gamma },
                LayerAllocation::Cake { gamma1: hyper.gamma1, gamma2: hyper.gamma2 },
                Fixed,
            ),
            PolicyBundle::Tova => (ScoringPolicy::Tova, LayerAllocation::Uniform, Fixed),
            PolicyBundle::H2o => (ScoringPolicy::H2o, LayerAllocation::Uniform, Fixed),
            PolicyBundle::Vatp => (ScoringPolicy::Vatp, LayerAllocation::Uniform, Fixed),
        };
        PolicyConfig { scoring, allocation, heads, budget, window, kernel: hyper.kernel }
    }
}

impl fmt::Display for PolicyBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyBundle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyBundle::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

/// Scored positions that are still retained, in flat (head-major) order.
fn candidates(cache: &LayerKVCache, head: usize) -> Vec<usize> {
    (0..cache.scored_len()).filter(|&i| cache.is_retained(head, i)).collect()
}

fn check_scores(cache: &LayerKVCache, scores: &ScoreTensor) -> Result<()> {
    ensure!(scores.kv_heads() == cache.kv_heads(), Dimension, "score rows do not match kv-heads");
    ensure!(
        scores.rows.iter().all(|r| r.len() == cache.scored_len()),
        Dimension,
        "score rows must cover the {} scored positions",
        cache.scored_len()
    );
    Ok(())
}

/// Keeps every window entry plus the top `budget - H_kv w` retained scored
/// entries across all heads. Ties go to the lower head, then lower position.
pub fn layer_evict(cache: &LayerKVCache, scores: &ScoreTensor, budget: usize) -> Result<EvictionMask> {
    check_scores(cache, scores)?;
    let kv = cache.kv_heads();
    let floor = kv * cache.window();
    ensure!(budget >= floor, Infeasible, "layer budget {budget} below window floor {floor}");
    let quota = budget - floor;
    let mut flat = Vec::new();
    let mut index = Vec::new();
    for h in 0..kv {
        for i in candidates(cache, h) {
            flat.push(scores.rows[h][i]);
            index.push((h, i));
        }
    }
    ensure!(quota <= flat.len(), Infeasible, "quota {quota} exceeds {} retained scored entries", flat.len());
    let mut mask = EvictionMask::window_only(kv, cache.seq_len(), cache.window());
    for k in top_k_indices(&flat, quota)? {
        let (h, i) = index[k];
        mask.set(h, i, true);
    }
    Ok(mask)
}

/// Independent per-head top-`(budget_h - w)` selection plus the window.
pub fn head_evict(cache: &LayerKVCache, scores: &ScoreTensor, budgets: &[usize]) -> Result<EvictionMask> {
    check_scores(cache, scores)?;
    let kv = cache.kv_heads();
    let w = cache.window();
    ensure!(budgets.len() == kv, Dimension, "{} head budgets for {kv} kv-heads", budgets.len());
    let mut mask = EvictionMask::window_only(kv, cache.seq_len(), w);
    for (h, &b) in budgets.iter().enumerate() {
        ensure!(b >= w, Infeasible, "head budget {b} below window {w}");
        let cand = candidates(cache, h);
        let quota = b - w;
        ensure!(quota <= cand.len(), Infeasible, "head {h} quota {quota} exceeds {} entries", cand.len());
        let row: Vec<f64> = cand.iter().map(|&i| scores.rows[h][i]).collect();
        for k in top_k_indices(&row, quota)? {
            mask.set(h, cand[k], true);
        }
    }
    Ok(mask)
}

/// Equal split of a layer budget over kv-heads (largest remainder).
pub fn fixed_head_budgets(layer_budget: usize, kv_heads: usize, window: usize, tokens: usize) -> Result<Vec<usize>> {
    apportion(&vec![1.0; kv_heads], layer_budget, BudgetLimits { floor: window, cap: tokens })
}

/// Selects the mask of a layer under the given head mode.
pub fn select_mask(cache: &LayerKVCache, scores: &ScoreTensor, mode: HeadBudgetMode, budget: usize) -> Result<EvictionMask> {
    match mode {
        HeadBudgetMode::Dynamic => layer_evict(cache, scores, budget),
        HeadBudgetMode::Fixed => {
            let budgets = fixed_head_budgets(budget, cache.kv_heads(), cache.window(), cache.seq_len())?;
            head_evict(cache, scores, &budgets)
        }
    }
}

/// Raw score of one query head over the scored positions.
fn head_score(layer: &PrefilledLayer, cfg: &PolicyConfig, h: usize) -> Result<Vec<f64>> {
    let w = layer.cache.window();
    let n = layer.tokens();
    let recent = &layer.recent[h];
    let kv = h / layer.group_size();
    let values = layer.cache.head(kv).values();
    match cfg.scoring {
        ScoringPolicy::Lava => lava_score(recent, value_norm_max(values)?, w),
        ScoringPolicy::SnapKv => snapkv_score(recent, w),
        ScoringPolicy::Cake { gamma } => cake_score(recent, w, gamma),
        ScoringPolicy::Vatp => vatp_score(recent, w, values),
        ScoringPolicy::Tova => {
            let last = recent.rows().last().ok_or_else(|| Error::State("no attention rows".into()))?;
            Ok(tova_score(&last[..n - w]))
        }
        ScoringPolicy::H2o => {
            let full = layer
                .full_attention
                .as_ref()
                .ok_or_else(|| Error::State("accumulated scores need the full attention matrix".into()))?;
            let mut s = h2o_score(&full[h])?;
            s.truncate(n - w);
            Ok(s)
        }
    }
}

/// Scores on kv-head granularity: per query head, reduced by max within
/// each group, then pooled.
pub fn score_layer(layer: &PrefilledLayer, cfg: &PolicyConfig, exec: Exec) -> Result<ScoreTensor> {
    let heads = exec.try_map_range(layer.heads(), |h| head_score(layer, cfg, h))?;
    let group = layer.group_size();
    let rows = heads
        .chunks(group)
        .map(|g| {
            let reduced = gqa_reduce_max(g)?;
            if cfg.pools() {
                pool_scores(&reduced, cfg.kernel)
            } else {
                Ok(reduced)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTensor { rows })
}

/// Scores once and selects the mask for `budget`.
pub fn compress_layer(layer: &PrefilledLayer, cfg: &PolicyConfig, budget: usize, exec: Exec) -> Result<(ScoreTensor, EvictionMask)> {
    let scores = score_layer(layer, cfg, exec)?;
    let mask = select_mask(&layer.cache, &scores, cfg.heads, budget)?;
    Ok((scores, mask))
}

/// Score rows recovered from the cache sidecar; evicted entries read as zero
/// and are never candidates.
pub fn stored_score_tensor(cache: &LayerKVCache) -> ScoreTensor {
    ScoreTensor {
        rows: cache
            .stored_scores()
            .into_iter()
            .map(|r| r.into_iter().map(|s| s.unwrap_or(0.0)).collect())
            .collect(),
    }
}

/// Normalized entropy of a layer's scores.
pub fn score_entropy(scores: &ScoreTensor, tokens: usize) -> Result<f64> {
    let flat: Vec<f64> = scores.rows.iter().flatten().copied().collect();
    let (p, _) = lava_normalized_scores(&flat)?;
    lava_layer_entropy(&p, scores.kv_heads(), tokens)
}

/// Supplier of prefilled layers in order.
pub trait LayerSource {
    fn model_config(&self) -> &ModelConfig;
    fn tokens(&self) -> usize;
    fn next_layer(&mut self) -> Result<Option<PrefilledLayer>>;
}

impl LayerSource for Prefiller<'_> {
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn tokens(&self) -> usize {
        Prefiller::tokens(self)
    }

    fn next_layer(&mut self) -> Result<Option<PrefilledLayer>> {
        Prefiller::next_layer(self)
    }
}

/// Replays the layers of a snapshot.
pub struct SnapshotSource<'a> {
    snapshot: &'a ModelSnapshot,
    next: usize,
}

impl<'a> SnapshotSource<'a> {
    pub fn new(snapshot: &'a ModelSnapshot) -> Self {
        SnapshotSource { snapshot, next: 0 }
    }
}

impl LayerSource for SnapshotSource<'_> {
    fn model_config(&self) -> &ModelConfig {
        &self.snapshot.config
    }

    fn tokens(&self) -> usize {
        self.snapshot.tokens()
    }

    fn next_layer(&mut self) -> Result<Option<PrefilledLayer>> {
        let layer = self.snapshot.layers.get(self.next).cloned();
        self.next += 1;
        Ok(layer)
    }
}

/// A layer after compression; `layer.cache` carries the final mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub layer: PrefilledLayer,
    pub scores: ScoreTensor,
    /// Normalized entropy of the layer's own scores.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub config: PolicyConfig,
    pub layers: Vec<CompressedLayer>,
    pub plan: BudgetPlan,
    /// Budgets after each round: `history[r]` covers layers `0..=r`.
    pub history: Vec<Vec<usize>>,
    /// Retained entries of compressed layers plus the full cache being
    /// prefilled, sampled whenever it can grow.
    pub occupancy: Vec<usize>,
    /// Set when a dynamic allocation fell back to an even split.
    pub fallback: bool,
}

impl PipelineRun {
    pub fn peak(&self) -> usize {
        self.occupancy.iter().copied().max().unwrap_or(0)
    }

    pub fn masks(&self) -> Vec<EvictionMask> {
        self.layers.iter().map(|l| l.layer.cache.mask()).collect()
    }
}

/// Keeps every earlier layer at or below its previous budget, moving any
/// excess to the newest layer (and overflow beyond its cap back to earlier
/// layers with room, in index order).
fn monotone_repair(raw: &[usize], prev: &[usize], cap: usize) -> Vec<usize> {
    let newest = raw.len() - 1;
    let mut out = raw.to_vec();
    let mut surplus = 0;
    for k in 0..newest {
        if out[k] > prev[k] {
            surplus += out[k] - prev[k];
            out[k] = prev[k];
        }
    }
    out[newest] += surplus;
    if out[newest] > cap {
        let mut overflow = out[newest] - cap;
        out[newest] = cap;
        for k in 0..newest {
            let room = prev[k] - out[k];
            let give = room.min(overflow);
            out[k] += give;
            overflow -= give;
        }
        debug_assert_eq!(overflow, 0);
    }
    out
}

/// Per-layer statistic driving a dynamic allocation.
fn allocation_stat(layer: &PrefilledLayer, scores: &ScoreTensor, alloc: &LayerAllocation) -> Result<(f64, f64)> {
    match alloc {
        LayerAllocation::Cake { .. } => {
            let w = layer.cache.window();
            Ok((cake_spatial(&layer.recent, w)?, cake_temporal(&layer.recent, w)?))
        }
        _ => Ok((score_entropy(scores, layer.tokens())?, 0.0)),
    }
}

/// Layer-by-layer prefill and compression.
///
/// Static allocations compress each layer once with its final budget.
/// Dynamic allocations reallocate the whole budget over the layers seen so
/// far after each prefill and re-evict earlier layers from their retained
/// entries using the stored scores.
pub fn run_pipeline<S: LayerSource>(source: &mut S, cfg: &PolicyConfig, exec: Exec) -> Result<PipelineRun> {
    let model = source.model_config().clone();
    let tokens = source.tokens();
    cfg.validate(&model, tokens)?;
    let limits = BudgetLimits::for_layer(model.kv_heads, model.window, tokens);
    let full_layer = limits.cap;
    let static_budgets = if cfg.allocation.is_dynamic() {
        None
    } else {
        Some(cfg.allocation.static_budgets(cfg.budget, model.layers, limits)?)
    };

    let mut layers: Vec<CompressedLayer> = Vec::with_capacity(model.layers);
    let mut stats: Vec<(f64, f64)> = Vec::new();
    let mut budgets: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut occupancy = Vec::new();
    let mut fallback = false;

    while let Some(mut layer) = source.next_layer()? {
        ensure!(layers.len() < model.layers, State, "source yielded more than {} layers", model.layers);
        let held: usize = layers.iter().map(|l| l.layer.cache.retained_count()).sum();
        occupancy.push(held + full_layer);

        let scores = score_layer(&layer, cfg, exec)?;
        layer.cache.record_scores(&scores.rows)?;
        let entropy = score_entropy(&scores, tokens)?;
        stats.push(allocation_stat(&layer, &scores, &cfg.allocation)?);
        layers.push(CompressedLayer { layer, scores, entropy });
        let l = layers.len();

        let next = match &static_budgets {
            Some(b) => b[..l].to_vec(),
            None => {
                let total = cfg.budget.min(l * full_layer);
                let raw = match cfg.allocation {
                    LayerAllocation::Cake { gamma1, gamma2 } => {
                        let (h, v): (Vec<f64>, Vec<f64>) = stats.iter().copied().unzip();
                        let (b, fell) = cake_layer_budgets(&h, &v, gamma1, gamma2, total, limits)?;
                        fallback |= fell;
                        b
                    }
                    _ => {
                        let e: Vec<f64> = stats.iter().map(|s| s.0).collect();
                        fallback |= e.iter().all(|&x| x == 0.0);
                        entropy_layer_budgets(&e, total, limits)?
                    }
                };
                if l == 1 {
                    raw
                } else {
                    monotone_repair(&raw, &budgets, full_layer)
                }
            }
        };

        for (k, entry) in layers.iter_mut().enumerate() {
            let unchanged = k + 1 < l && budgets[k] == next[k];
            if unchanged {
                continue;
            }
            let stored = stored_score_tensor(&entry.layer.cache);
            let mask = select_mask(&entry.layer.cache, &stored, cfg.heads, next[k])?;
            entry.layer.cache.apply_mask(&mask)?;
        }
        budgets = next;
        history.push(budgets.clone());
    }
    ensure!(layers.len() == model.layers, State, "source ended after {} of {} layers", layers.len(), model.layers);

    let per_head = layers.iter().map(|l| l.layer.cache.mask().per_head_counts()).collect();
    let plan = BudgetPlan { total: budgets.iter().sum(), per_layer: budgets, per_head };
    plan.validate(model.kv_heads, model.window)?;
    Ok(PipelineRun { config: *cfg, layers, plan, history, occupancy, fallback })
}

/// The LAVa pipeline: entropy-driven layer budgets with joint head selection.
pub fn lava_pipeline<S: LayerSource>(source: &mut S, budget: usize, kernel: usize, exec: Exec) -> Result<PipelineRun> {
    let window = source.model_config().window;
    let hyper = Hyper { kernel, ..Hyper::default() };
    run_pipeline(source, &PolicyBundle::Lava.config(budget, window, &hyper), exec)
}

pub fn baseline_pipeline<S: LayerSource>(source: &mut S, cfg: &PolicyConfig, exec: Exec) -> Result<PipelineRun> {
    run_pipeline(source, cfg, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{init_random_model, synthetic_inputs, synthetic_snapshot, PrefillOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cache_with(kv: usize, n: usize, w: usize) -> LayerKVCache {
        let mut c = LayerKVCache::new(kv, 1, w);
        for _ in 0..n {
            for h in 0..kv {
                c.append_kv(h, &[0.0], &[1.0]).unwrap();
            }
        }
        c
    }

    fn tensor(rows: &[&[f64]]) -> ScoreTensor {
        ScoreTensor { rows: rows.iter().map(|r| r.to_vec()).collect() }
    }

    #[test]
    fn layer_evict_examples() {
        // two scored positions per head, window 1
        let cache = cache_with(2, 3, 1);
        let s = tensor(&[&[0.9, 0.1], &[0.5, 0.4]]);
        let mask = layer_evict(&cache, &s, 2 + 2).unwrap();
        assert_eq!(mask.bits(), &[vec![true, false, true], vec![true, false, true]]);
        let mask = layer_evict(&cache, &s, 6).unwrap();
        assert_eq!(mask, EvictionMask::all_ones(2, 3));
        assert!(matches!(layer_evict(&cache, &s, 1), Err(Error::Infeasible(_))));
        assert!(matches!(layer_evict(&cache, &s, 7), Err(Error::Infeasible(_))));
    }

    #[test]
    fn layer_evict_matches_global_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let kv = rng.random_range(1..4);
            let w = rng.random_range(1..3);
            let n = w + rng.random_range(1..8);
            let cache = cache_with(kv, n, w);
            let rows: Vec<Vec<f64>> =
                (0..kv).map(|_| (0..n - w).map(|_| rng.random_range(0..4) as f64).collect()).collect();
            let quota = rng.random_range(0..=kv * (n - w));
            let mut all: Vec<(f64, usize, usize)> = Vec::new();
            for (h, r) in rows.iter().enumerate() {
                for (i, &x) in r.iter().enumerate() {
                    all.push((x, h, i));
                }
            }
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut expect = EvictionMask::window_only(kv, n, w);
            for e in &all[..quota] {
                expect.set(e.1, e.2, true);
            }
            let got = layer_evict(&cache, &ScoreTensor { rows }, quota + kv * w).unwrap();
            assert_eq!(got, expect);
            assert_eq!(got.retained_count(), quota + kv * w);
        }
    }

    #[test]
    fn head_evict_examples() {
        let cache = cache_with(2, 4, 1);
        let s = tensor(&[&[0.3, 0.2, 0.1], &[0.3, 0.2, 0.1]]);
        let mask = head_evict(&cache, &s, &[2, 2]).unwrap();
        assert_eq!(mask.head(0), mask.head(1));
        assert_eq!(mask.head(0), &[true, false, false, true]);
        assert_eq!(head_evict(&cache, &s, &[1, 1]).unwrap(), EvictionMask::window_only(2, 4, 1));
        assert!(head_evict(&cache, &s, &[0, 2]).is_err());
    }

    #[test]
    fn head_evict_matches_per_head_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let kv = rng.random_range(1..4);
            let w = 2;
            let n = w + rng.random_range(1..9);
            let cache = cache_with(kv, n, w);
            let rows: Vec<Vec<f64>> =
                (0..kv).map(|_| (0..n - w).map(|_| rng.random_range(0..3) as f64).collect()).collect();
            let budgets: Vec<usize> = (0..kv).map(|_| w + rng.random_range(0..=n - w)).collect();
            let mut expect = EvictionMask::window_only(kv, n, w);
            for h in 0..kv {
                let mut idx: Vec<usize> = (0..n - w).collect();
                idx.sort_by(|&a, &b| rows[h][b].partial_cmp(&rows[h][a]).unwrap().then(a.cmp(&b)));
                for &i in &idx[..budgets[h] - w] {
                    expect.set(h, i, true);
                }
            }
            assert_eq!(head_evict(&cache, &ScoreTensor { rows }, &budgets).unwrap(), expect);
        }
    }

    #[test]
    fn joint_topk_equals_count_then_select() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let kv = rng.random_range(1..4);
            let w = rng.random_range(0..3);
            let n = w + rng.random_range(1..6);
            let cache = cache_with(kv, n, w);
            let rows: Vec<Vec<f64>> =
                (0..kv).map(|_| (0..n - w).map(|_| rng.random_range(0..3) as f64).collect()).collect();
            let budget = kv * w + rng.random_range(0..=kv * (n - w));
            let counts = crate::allocation::adakv_head_budgets(&rows, budget, w).unwrap();
            let s = ScoreTensor { rows };
            assert_eq!(layer_evict(&cache, &s, budget).unwrap(), head_evict(&cache, &s, &counts).unwrap());
        }
    }

    #[test]
    fn nested_eviction_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let (kv, w, n) = (3, 2, 12);
            let mut cache = cache_with(kv, n, w);
            let rows: Vec<Vec<f64>> = (0..kv).map(|_| (0..n - w).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let s = ScoreTensor { rows };
            cache.record_scores(&s.rows).unwrap();
            let b1 = kv * w + rng.random_range(0..=kv * (n - w));
            let b2 = kv * w + rng.random_range(0..=b1 - kv * w);
            for mode in [HeadBudgetMode::Dynamic, HeadBudgetMode::Fixed] {
                let mut c = cache.clone();
                c.apply_mask(&select_mask(&c, &s, mode, b1).unwrap()).unwrap();
                let again = select_mask(&c, &stored_score_tensor(&c), mode, b2).unwrap();
                assert_eq!(again, select_mask(&cache, &s, mode, b2).unwrap());
            }
        }
    }

    fn model(layers: usize, seed: u64) -> ModelConfig {
        ModelConfig::new(layers, 4, 2, 4, 3).with_seed(seed).with_vocab(13)
    }

    #[test]
    fn lava_on_one_layer_is_layer_evict() {
        let cfg = model(1, 7);
        let snap = synthetic_snapshot(&cfg, 24, PrefillOptions::default()).unwrap();
        let run = lava_pipeline(&mut SnapshotSource::new(&snap), 20, 7, Exec::Sequential).unwrap();
        assert_eq!(run.plan.per_layer, vec![20]);
        let pc = PolicyBundle::Lava.config(20, 3, &Hyper::default());
        let (_, mask) = compress_layer(&snap.layers[0], &pc, 20, Exec::Sequential).unwrap();
        assert_eq!(run.masks()[0], mask);
    }

    #[test]
    fn snapkv_dispatches_to_equal_head_budgets() {
        let cfg = model(1, 8);
        let snap = synthetic_snapshot(&cfg, 20, PrefillOptions::default()).unwrap();
        let pc = PolicyBundle::SnapKv.config(17, 3, &Hyper::default());
        let (scores, mask) = compress_layer(&snap.layers[0], &pc, 17, Exec::Sequential).unwrap();
        let layer = &snap.layers[0];
        let mut rows = Vec::new();
        for g in 0..2 {
            let a = snapkv_score(&layer.recent[2 * g], 3).unwrap();
            let b = snapkv_score(&layer.recent[2 * g + 1], 3).unwrap();
            let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
            rows.push(pool_scores(&m, 7).unwrap());
        }
        assert_eq!(scores.rows, rows);
        assert_eq!(mask, head_evict(&layer.cache, &ScoreTensor { rows }, &[9, 8]).unwrap());
    }

    #[test]
    fn symmetric_layers_get_equal_budgets() {
        let cfg = model(2, 11);
        let mut weights = init_random_model(&cfg).unwrap();
        let inputs = synthetic_inputs(&cfg, 16);
        weights.layers[1] = weights.layers[0].clone();
        // both layers replay the same prefilled data
        let mut pf = Prefiller::new(&weights, inputs, PrefillOptions::default()).unwrap();
        let first = pf.next_layer().unwrap().unwrap();
        let mut snap = ModelSnapshot { config: cfg.clone(), layers: vec![first.clone(), first], w_m: weights.w_m.clone() };
        snap.layers[1].index = 1;
        let run = lava_pipeline(&mut SnapshotSource::new(&snap), 30, 7, Exec::Sequential).unwrap();
        assert_eq!(run.plan.per_layer, vec![15, 15]);
        let snap_run = run_pipeline(
            &mut SnapshotSource::new(&snap),
            &PolicyBundle::SnapKv.config(30, 3, &Hyper::default()),
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(snap_run.plan.per_layer, vec![15, 15]);
    }

    #[test]
    fn pyramid_with_unit_beta_matches_snapkv() {
        let cfg = model(3, 12);
        let snap = synthetic_snapshot(&cfg, 20, PrefillOptions::default()).unwrap();
        let hyper = Hyper { beta: 1.0, ..Hyper::default() };
        let a = run_pipeline(&mut SnapshotSource::new(&snap), &PolicyBundle::PyramidKv.config(50, 3, &hyper), Exec::Sequential).unwrap();
        let b = run_pipeline(&mut SnapshotSource::new(&snap), &PolicyBundle::SnapKv.config(50, 3, &hyper), Exec::Sequential).unwrap();
        assert_eq!(a.plan.per_layer, b.plan.per_layer);
        assert_eq!(a.masks(), b.masks());
    }

    #[test]
    fn cake_budgets_follow_preferences() {
        let cfg = model(3, 13);
        let snap = synthetic_snapshot(&cfg, 30, PrefillOptions::default()).unwrap();
        let run = run_pipeline(&mut SnapshotSource::new(&snap), &PolicyBundle::Cake.config(90, 3, &Hyper::default()), Exec::Sequential)
            .unwrap();
        let p: Vec<f64> = snap
            .layers
            .iter()
            .map(|l| cake_spatial(&l.recent, 3).unwrap().max(1e-12) * cake_temporal(&l.recent, 3).unwrap().max(1e-12))
            .collect();
        let limits = BudgetLimits::for_layer(2, 3, 30);
        let (direct, _) = cake_layer_budgets(&p, &[1.0; 3], 1.0, 1.0, 90, limits).unwrap();
        assert_eq!(run.plan.per_layer.iter().sum::<usize>(), 90);
        for (b, d) in run.plan.per_layer.iter().zip(&direct) {
            assert!(b.abs_diff(*d) <= 2, "{:?} vs {:?}", run.plan.per_layer, direct);
        }
    }

    #[test]
    fn pipeline_is_deterministic_and_sources_agree() {
        let cfg = model(3, 21);
        let weights = init_random_model(&cfg).unwrap();
        let inputs = synthetic_inputs(&cfg, 22);
        let mut pf = Prefiller::new(&weights, inputs.clone(), PrefillOptions::default()).unwrap();
        let a = lava_pipeline(&mut pf, 40, 7, Exec::Parallel).unwrap();
        let snap = ModelSnapshot::from_prefill(&weights, crate::toymodel::prefill(&weights, &inputs, PrefillOptions::default()).unwrap());
        let b = lava_pipeline(&mut SnapshotSource::new(&snap), 40, 7, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_budget_fails_before_eviction() {
        let cfg = model(2, 1);
        let snap = synthetic_snapshot(&cfg, 12, PrefillOptions::default()).unwrap();
        assert!(matches!(lava_pipeline(&mut SnapshotSource::new(&snap), 11, 7, Exec::Sequential), Err(Error::Infeasible(_))));
        assert!(matches!(lava_pipeline(&mut SnapshotSource::new(&snap), 49, 7, Exec::Sequential), Err(Error::Infeasible(_))));
    }

    #[test]
    fn h2o_needs_full_attention() {
        let cfg = model(1, 2);
        let pc = PolicyBundle::H2o.config(12, 3, &Hyper::default());
        let snap = synthetic_snapshot(&cfg, 12, PrefillOptions::default()).unwrap();
        assert!(matches!(run_pipeline(&mut SnapshotSource::new(&snap), &pc, Exec::Sequential), Err(Error::State(_))));
        let snap = synthetic_snapshot(&cfg, 12, PrefillOptions { keep_full_attention: true }).unwrap();
        let run = run_pipeline(&mut SnapshotSource::new(&snap), &pc, Exec::Sequential).unwrap();
        assert_eq!(run.plan.per_layer, vec![12]);
    }

    #[test]
    fn monotone_repair_examples() {
        assert_eq!(monotone_repair(&[5, 5], &[4], 100), vec![4, 6]);
        assert_eq!(monotone_repair(&[5, 3, 8], &[6, 2], 8), vec![6, 2, 8]);
        assert_eq!(monotone_repair(&[3, 3, 3], &[4, 4], 8), vec![3, 3, 3]);
    }

    #[test]
    fn bundle_names_round_trip() {
        for b in PolicyBundle::ALL {
            assert_eq!(b.name().parse::<PolicyBundle>().unwrap(), b);
        }
        assert!("full".parse::<PolicyBundle>().is_err());
    }
}
