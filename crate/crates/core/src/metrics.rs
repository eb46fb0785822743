//! Loss measurements and upper bounds for evicted caches.
//!
//! All layer losses are taken at the current (last) stream: `y` is the
//! attention output with the full cache and `ŷ` the output after eviction,
//! with the surviving attention renormalized.

use serde::Serialize;

use crate::cache::{EvictionMask, LayerKVCache};
use crate::engine::PipelineRun;
use crate::error::{ensure, Error, Result};
use crate::exec::Exec;
use crate::numerics::{cross_entropy, induced_one_norm, l1_norm, softmax_row, vec_mat, Mat};
use crate::scoring::value_norm_max;
use crate::toymodel::{
    attention_output, attention_step, forward_logits, layer_forward, project_kv, prefill, residual_ffn, ModelWeights,
    PrefillOptions, PrefilledLayer,
};

/// Largest number of scored entries the exhaustive oracle will enumerate.
pub const ORACLE_CAP: usize = 20;

/// `(A ⊙ I) / ‖A ⊙ I‖₁`.
pub fn masked_renormalize(a: &[f64], keep: &[bool]) -> Result<Vec<f64>> {
    ensure!(a.len() == keep.len(), Dimension, "{} weights for {} mask bits", a.len(), keep.len());
    if keep.iter().all(|&k| k) {
        return Ok(a.to_vec());
    }
    let z: f64 = a.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| x).sum();
    ensure!(z > 0.0, Domain, "no attention mass survives the mask");
    Ok(a.iter().zip(keep).map(|(x, &k)| if k { x / z } else { 0.0 }).collect())
}

/// Attention of each query head over every entry of the cache, ignoring
/// retention flags.
pub fn full_attention_rows(cache: &LayerKVCache, queries: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let kv = cache.kv_heads();
    ensure!(!queries.is_empty() && queries.len().is_multiple_of(kv), Dimension, "query heads not divisible by kv-heads");
    let group = queries.len() / kv;
    let scale = 1.0 / (cache.head_dim() as f64).sqrt();
    queries
        .iter()
        .enumerate()
        .map(|(h, q)| attention_step(q, cache.head(h / group).keys(), scale))
        .collect()
}

fn group_of(rows: usize, mask: &EvictionMask) -> Result<usize> {
    let kv = mask.kv_heads();
    ensure!(kv > 0 && rows.is_multiple_of(kv), Dimension, "{rows} query heads for {kv} kv-heads");
    Ok(rows / kv)
}

/// `‖y - ŷ‖₁` from precomputed full attention rows (one per query head).
pub fn output_loss_from_rows(rows: &[Vec<f64>], cache: &LayerKVCache, mask: &EvictionMask, w_o: &Mat) -> Result<f64> {
    let group = group_of(rows.len(), mask)?;
    let masked = rows
        .iter()
        .enumerate()
        .map(|(h, a)| masked_renormalize(a, mask.head(h / group)))
        .collect::<Result<Vec<_>>>()?;
    let y = attention_output(rows, cache, w_o)?;
    let y_hat = attention_output(&masked, cache, w_o)?;
    Ok(y.iter().zip(&y_hat).map(|(a, b)| (a - b).abs()).sum())
}

/// Exact layer attention output loss of `mask` for the given queries.
pub fn layer_output_loss(cache: &LayerKVCache, mask: &EvictionMask, queries: &[&[f64]], w_o: &Mat) -> Result<f64> {
    output_loss_from_rows(&full_attention_rows(cache, queries)?, cache, mask, w_o)
}

/// `‖W_Oᵀ‖₁`, the largest row absolute sum of `W_O`.
pub fn output_norm(w_o: &Mat) -> f64 {
    induced_one_norm(&w_o.transpose())
}

/// `2 Ĉ Σ_h V̄_h Σ_i A_h[i] (1 - I[i])` with `V̄` indexed by kv-head.
pub fn theorem1_bound(rows: &[&[f64]], vbars: &[f64], w_o: &Mat, mask: &EvictionMask) -> Result<f64> {
    let group = group_of(rows.len(), mask)?;
    ensure!(vbars.len() == mask.kv_heads(), Dimension, "one value norm per kv-head required");
    let evicted: f64 = rows
        .iter()
        .enumerate()
        .map(|(h, a)| vbars[h / group] * evicted_mass(a, mask.head(h / group)))
        .sum();
    Ok(2.0 * output_norm(w_o) * evicted)
}

/// Head constant `max_k ‖V_h[k] W_O^h‖₁` of the coarser bound, for every query head.
pub fn adakv_head_constants(cache: &LayerKVCache, heads: usize, w_o: &Mat) -> Result<Vec<f64>> {
    let kv = cache.kv_heads();
    ensure!(heads.is_multiple_of(kv), Dimension, "query heads not divisible by kv-heads");
    let dh = cache.head_dim();
    ensure!(w_o.rows() == heads * dh, Dimension, "output projection has {} rows", w_o.rows());
    (0..heads)
        .map(|h| {
            let slice = w_o.row_block(h * dh, (h + 1) * dh);
            let mut best: f64 = 0.0;
            for v in cache.head(h / (heads / kv)).values() {
                best = best.max(l1_norm(&vec_mat(v, &slice)?));
            }
            Ok(best)
        })
        .collect()
}

/// `2 C Σ_h Σ_i A_h[i] (1 - I[i])` with `C` the largest head constant.
pub fn adakv_bound(rows: &[&[f64]], cache: &LayerKVCache, w_o: &Mat, mask: &EvictionMask) -> Result<f64> {
    let group = group_of(rows.len(), mask)?;
    let c = adakv_head_constants(cache, rows.len(), w_o)?.into_iter().fold(0.0, f64::max);
    let evicted: f64 = rows.iter().enumerate().map(|(h, a)| evicted_mass(a, mask.head(h / group))).sum();
    Ok(2.0 * c * evicted)
}

fn evicted_mass(a: &[f64], keep: &[bool]) -> f64 {
    a.iter().zip(keep).filter(|(_, &k)| !k).map(|(x, _)| x).sum()
}

/// Per-kv-head `V̄` of a cache.
pub fn value_norms(cache: &LayerKVCache) -> Result<Vec<f64>> {
    cache.heads().iter().map(|h| value_norm_max(h.values())).collect()
}

/// `CE(p, p̂) - CE(p, p)`, zero when the distributions agree.
pub fn logit_divergence(p: &[f64], p_hat: &[f64]) -> Result<f64> {
    Ok((cross_entropy(p, p_hat)? - cross_entropy(p, p)?).max(0.0))
}

/// Output distribution of the last stream when every layer attends over
/// the masked prefill caches. The stream's own keys and values are
/// recomputed from its (perturbed) hidden state at each layer.
pub fn masked_output_distribution(weights: &ModelWeights, inputs: &[Vec<f64>], masks: &[EvictionMask]) -> Result<Vec<f64>> {
    let cfg = &weights.config;
    ensure!(masks.len() == cfg.layers, Dimension, "{} masks for {} layers", masks.len(), cfg.layers);
    let pf = prefill(weights, inputs, PrefillOptions::default())?;
    let n = inputs.len();
    let mut x = inputs[n - 1].clone();
    let mut y = Vec::new();
    for ((layer, lw), mask) in pf.layers.into_iter().zip(&weights.layers).zip(masks) {
        let mut cache = layer.cache;
        cache.apply_mask(mask)?;
        let (ks, vs) = project_kv(&x, lw, cfg.head_dim)?;
        for (h, (k, v)) in ks.iter().zip(&vs).enumerate() {
            cache.overwrite(h, n - 1, k, v);
        }
        let step = layer_forward(&x, &cache, lw, cfg)?;
        x = step.x_next;
        y = step.y;
    }
    forward_logits(&y, weights)
}

/// Logit loss with masks applied at every layer and full propagation.
pub fn logit_loss(weights: &ModelWeights, inputs: &[Vec<f64>], masks: &[EvictionMask]) -> Result<f64> {
    let full: Vec<EvictionMask> = masks.iter().map(|m| EvictionMask::all_ones(m.kv_heads(), inputs.len())).collect();
    let p = masked_output_distribution(weights, inputs, &full)?;
    let p_hat = masked_output_distribution(weights, inputs, masks)?;
    logit_divergence(&p, &p_hat)
}

/// Logit loss from recorded tensors only: the last layer's recorded query
/// attends over its masked cache and the output goes through that layer's
/// feed-forward and the un-embedding. Earlier layers enter only through the
/// recorded query.
pub fn snapshot_logit_loss(last: &PrefilledLayer, mask: &EvictionMask, w_m: &Mat) -> Result<f64> {
    let rows = last.last_attention().into_iter().map(<[f64]>::to_vec).collect::<Vec<_>>();
    let group = group_of(rows.len(), mask)?;
    let masked = rows
        .iter()
        .enumerate()
        .map(|(h, a)| masked_renormalize(a, mask.head(h / group)))
        .collect::<Result<Vec<_>>>()?;
    let dist = |r: &[Vec<f64>]| -> Result<Vec<f64>> {
        let y = attention_output(r, &last.cache, &last.w_o)?;
        softmax_row(&vec_mat(&residual_ffn(&y, &last.ffn_up, &last.ffn_down)?, w_m)?)
    };
    logit_divergence(&dist(&rows)?, &dist(&masked)?)
}

/// Result of the exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub mask: EvictionMask,
    pub loss: f64,
    /// Number of masks evaluated.
    pub evaluated: usize,
}

/// Next integer with the same number of set bits (Gosper's hack).
fn next_combination(x: u64) -> u64 {
    let c = x & x.wrapping_neg();
    let r = x + c;
    (((r ^ x) >> 2) / c) | r
}

/// Minimizes the true loss over every window-respecting mask of `budget`.
///
/// Masks are enumerated as bitsets over the scored entries (head-major) in
/// increasing numeric order; the first minimizer in that order wins.
pub fn oracle_exhaustive_evict(
    cache: &LayerKVCache,
    queries: &[&[f64]],
    w_o: &Mat,
    budget: usize,
    exec: Exec,
) -> Result<OracleResult> {
    let kv = cache.kv_heads();
    let w = cache.window();
    let scored = cache.scored_len();
    let slots = kv * scored;
    ensure!(slots <= ORACLE_CAP, TooLarge, "{slots} scored entries exceed the enumeration cap of {ORACLE_CAP}");
    let floor = kv * w;
    ensure!(budget >= floor, Infeasible, "budget {budget} below window floor {floor}");
    let quota = budget - floor;
    ensure!(quota <= slots, Infeasible, "budget {budget} exceeds the cache size {}", floor + slots);

    let rows = full_attention_rows(cache, queries)?;
    let mut combos = Vec::new();
    if quota == 0 {
        combos.push(0u64);
    } else {
        let mut x = (1u64 << quota) - 1;
        while x < (1u64 << slots) {
            combos.push(x);
            x = next_combination(x);
        }
    }
    let to_mask = |bits: u64| {
        let mut m = EvictionMask::window_only(kv, cache.seq_len(), w);
        for s in 0..slots {
            if bits >> s & 1 == 1 {
                m.set(s / scored, s % scored, true);
            }
        }
        m
    };
    let losses = exec.try_map_range(combos.len(), |k| output_loss_from_rows(&rows, cache, &to_mask(combos[k]), w_o))?;
    let (best, loss) = losses
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &l)| if l < acc.1 { (k, l) } else { acc });
    Ok(OracleResult { mask: to_mask(combos[best]), loss, evaluated: combos.len() })
}

/// Loss and bounds of one compressed layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLoss {
    pub layer: usize,
    pub true_l1_loss: f64,
    pub theorem1_bound: f64,
    pub adakv_bound: f64,
}

impl LayerLoss {
    /// Whether the measured loss respects the bound (with rounding slack).
    pub fn bound_holds(&self) -> bool {
        self.true_l1_loss <= self.theorem1_bound * (1.0 + 1e-9) + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub policy: String,
    pub budget: usize,
    pub seed: u64,
    pub layers: Vec<LayerLoss>,
    pub logit_ce: f64,
}

impl LossReport {
    /// Layers whose measured loss exceeds the bound.
    pub fn violations(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| !l.bound_holds()).map(|l| l.layer).collect()
    }
}

/// Loss and bounds of `mask` at the last stream of a prefilled layer.
pub fn evaluate_layer(layer: &PrefilledLayer, mask: &EvictionMask) -> Result<LayerLoss> {
    let rows: Vec<Vec<f64>> = layer.last_attention().into_iter().map(<[f64]>::to_vec).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let vbars = value_norms(&layer.cache)?;
    Ok(LayerLoss {
        layer: layer.index,
        true_l1_loss: output_loss_from_rows(&rows, &layer.cache, mask, &layer.w_o)?,
        theorem1_bound: theorem1_bound(&refs, &vbars, &layer.w_o, mask)?,
        adakv_bound: adakv_bound(&refs, &layer.cache, &layer.w_o, mask)?,
    })
}

/// Per-layer losses of a pipeline run plus the snapshot logit loss.
pub fn evaluate(run: &PipelineRun, w_m: &Mat, policy: &str, seed: u64) -> Result<LossReport> {
    let layers = run
        .layers
        .iter()
        .map(|l| evaluate_layer(&l.layer, &l.layer.cache.mask()))
        .collect::<Result<Vec<_>>>()?;
    let last = run.layers.last().ok_or_else(|| Error::State("run without layers".into()))?;
    let logit_ce = snapshot_logit_loss(&last.layer, &last.layer.cache.mask(), w_m)?;
    Ok(LossReport { policy: policy.to_string(), budget: run.config.budget, seed, layers, logit_ce })
}
