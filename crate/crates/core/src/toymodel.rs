//! Seeded toy decoder.
//!
//! Each layer projects its input stream into queries, keys and values,
//! attends causally over its KV cache, maps the concatenated head outputs
//! through `W_O` and then computes `x_{l+1} = y + FFN(y)` (no residual from
//! `x_l`). After the last layer an un-embedding `W_M` produces logits.
//!
//! All weights are drawn i.i.d. from `U[-1/sqrt(d), 1/sqrt(d)]` by a
//! ChaCha8 generator seeded with the configured seed, in the order
//! `W_Q, W_K, W_V, W_O, FFN_up, FFN_down` per layer, then `W_M`, then one
//! value gain per (layer, kv-head).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cache::{HeadCache, LayerKVCache};
use crate::error::{ensure, Error, Result};
use crate::numerics::{dot, softmax_row, vec_mat, Mat};
use crate::scoring::RecentAttention;

/// FFN inner width as a multiple of the model dimension.
pub const FFN_MULT: usize = 4;

/// Standard deviation of synthetic input vectors.
pub const INPUT_STD: f64 = 2.0;

const INPUT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// Recent-window size in tokens.
    pub window: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Spread of per-kv-head value gains: each head's `W_V` block is scaled
    /// by `spread^u`, `u ~ U[-1, 1)`. `1.0` leaves the weights untouched.
    pub value_spread: f64,
}

impl ModelConfig {
    pub fn new(layers: usize, heads: usize, kv_heads: usize, head_dim: usize, window: usize) -> Self {
        ModelConfig { layers, heads, kv_heads, head_dim, window, vocab: 16, seed: 0, value_spread: 1.0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn with_value_spread(mut self, spread: f64) -> Self {
        self.value_spread = spread;
        self
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Query heads per kv-head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv-heads", self.kv_heads),
            ("head dim", self.head_dim),
            ("vocab", self.vocab),
            ("window", self.window),
        ] {
            ensure!(v >= 1, Config, "{name} must be at least 1");
        }
        ensure!(
            self.heads.is_multiple_of(self.kv_heads),
            Config,
            "{} query heads cannot be grouped over {} kv-heads",
            self.heads,
            self.kv_heads
        );
        ensure!(
            self.value_spread.is_finite() && self.value_spread >= 1.0,
            Config,
            "value spread must be >= 1, got {}",
            self.value_spread
        );
        Ok(())
    }

    /// Fails unless `tokens` leaves at least one position outside the window.
    pub fn validate_tokens(&self, tokens: usize) -> Result<()> {
        ensure!(
            tokens > self.window,
            Config,
            "{tokens} tokens leave no position outside a window of {}",
            self.window
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// d x d
    pub w_q: Mat,
    /// d x (kv_heads * head_dim)
    pub w_k: Mat,
    /// d x (kv_heads * head_dim)
    pub w_v: Mat,
    /// d x d
    pub w_o: Mat,
    /// d x 4d
    pub ffn_up: Mat,
    /// 4d x d
    pub ffn_down: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// d x vocab
    pub w_m: Mat,
}

pub fn init_random_model(cfg: &ModelConfig) -> Result<ModelWeights> {
    cfg.validate()?;
    let d = cfg.model_dim();
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |rows: usize, cols: usize| Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound));
    let mut layers: Vec<LayerWeights> = (0..cfg.layers)
        .map(|_| LayerWeights {
            w_q: draw(d, d),
            w_k: draw(d, cfg.kv_dim()),
            w_v: draw(d, cfg.kv_dim()),
            w_o: draw(d, d),
            ffn_up: draw(d, FFN_MULT * d),
            ffn_down: draw(FFN_MULT * d, d),
        })
        .collect();
    let w_m = draw(d, cfg.vocab);
    for layer in &mut layers {
        for h in 0..cfg.kv_heads {
            let u: f64 = rng.random_range(-1.0..1.0);
            if cfg.value_spread != 1.0 {
                let gain = cfg.value_spread.powf(u);
                layer.w_v.scale_cols(h * cfg.head_dim, (h + 1) * cfg.head_dim, gain);
            }
        }
    }
    Ok(ModelWeights { config: cfg.clone(), layers, w_m })
}

/// `n` seeded Gaussian input vectors of the model dimension.
pub fn synthetic_inputs(cfg: &ModelConfig, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INPUT_STREAM);
    (0..n)
        .map(|_| {
            (0..cfg.model_dim())
                .map(|_| INPUT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn split_heads(v: &[f64], head_dim: usize) -> Vec<Vec<f64>> {
    v.chunks(head_dim).map(<[f64]>::to_vec).collect()
}

/// Per-head queries of one stream.
pub fn project_queries(x: &[f64], layer: &LayerWeights, head_dim: usize) -> Result<Vec<Vec<f64>>> {
    Ok(split_heads(&vec_mat(x, &layer.w_q)?, head_dim))
}

/// Per-kv-head keys and values of one stream.
pub type KvRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn project_kv(x: &[f64], layer: &LayerWeights, head_dim: usize) -> Result<KvRows> {
    let k = vec_mat(x, &layer.w_k)?;
    let v = vec_mat(x, &layer.w_v)?;
    Ok((split_heads(&k, head_dim), split_heads(&v, head_dim)))
}

/// `softmax(q · Kᵀ · scale)` over the given keys.
pub fn attention_step(q: &[f64], keys: &[Vec<f64>], scale: f64) -> Result<Vec<f64>> {
    ensure!(!keys.is_empty(), Domain, "attention over zero keys");
    ensure!(
        keys.iter().all(|k| k.len() == q.len()),
        Dimension,
        "key width does not match query width {}",
        q.len()
    );
    let logits: Vec<f64> = keys.iter().map(|k| dot(q, k) * scale).collect();
    softmax_row(&logits)
}

/// Attention of `q` over the retained entries among the first `upto`
/// positions of a head; evicted positions read as zero.
pub fn attend_head(q: &[f64], head: &HeadCache, upto: usize, scale: f64) -> Result<Vec<f64>> {
    let live: Vec<usize> = (0..upto).filter(|&i| head.retained()[i]).collect();
    ensure!(!live.is_empty(), State, "no retained entries to attend over");
    let keys: Vec<Vec<f64>> = live.iter().map(|&i| head.keys()[i].clone()).collect();
    let weights = attention_step(q, &keys, scale)?;
    let mut row = vec![0.0; upto];
    for (&i, w) in live.iter().zip(weights) {
        row[i] = w;
    }
    Ok(row)
}

pub fn ffn(y: &[f64], up: &Mat, down: &Mat) -> Result<Vec<f64>> {
    let mut hidden = vec_mat(y, up)?;
    hidden.iter_mut().for_each(|h| *h = h.max(0.0));
    vec_mat(&hidden, down)
}

/// `y + FFN(y)`.
pub fn residual_ffn(y: &[f64], up: &Mat, down: &Mat) -> Result<Vec<f64>> {
    let f = ffn(y, up, down)?;
    Ok(y.iter().zip(f).map(|(a, b)| a + b).collect())
}

/// Concatenated head outputs `Cat_h(A_h V_h)` times `W_O`.
pub fn attention_output(rows: &[Vec<f64>], cache: &LayerKVCache, w_o: &Mat) -> Result<Vec<f64>> {
    let kv_heads = cache.kv_heads();
    ensure!(rows.len().is_multiple_of(kv_heads), Dimension, "query heads not divisible by kv-heads");
    let group = rows.len() / kv_heads;
    let dh = cache.head_dim();
    let mut cat = vec![0.0; rows.len() * dh];
    for (h, row) in rows.iter().enumerate() {
        let values = cache.head(h / group).values();
        ensure!(row.len() <= values.len(), Dimension, "attention row longer than cache");
        let out = &mut cat[h * dh..(h + 1) * dh];
        for (a, v) in row.iter().zip(values) {
            if *a != 0.0 {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += a * x;
                }
            }
        }
    }
    vec_mat(&cat, w_o)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    pub y: Vec<f64>,
    pub x_next: Vec<f64>,
    /// One attention row per query head over the current cache length.
    pub attention: Vec<Vec<f64>>,
}

/// One stream through one layer; the stream's own K/V must already be in `cache`.
pub fn layer_forward(x: &[f64], cache: &LayerKVCache, weights: &LayerWeights, cfg: &ModelConfig) -> Result<LayerStep> {
    ensure!(cache.seq_len() > 0, State, "layer forward over an empty cache");
    let group = cfg.group_size();
    let scale = cfg.attention_scale();
    let queries = project_queries(x, weights, cfg.head_dim)?;
    let attention = queries
        .iter()
        .enumerate()
        .map(|(h, q)| {
            let head = cache.head(h / group);
            attend_head(q, head, head.len(), scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let y = attention_output(&attention, cache, &weights.w_o)?;
    let x_next = residual_ffn(&y, &weights.ffn_up, &weights.ffn_down)?;
    Ok(LayerStep { y, x_next, attention })
}

/// `softmax((y_L + FFN_L(y_L)) W_M)`.
pub fn forward_logits(y_last: &[f64], weights: &ModelWeights) -> Result<Vec<f64>> {
    let last = weights.layers.last().ok_or_else(|| Error::Config("model without layers".into()))?;
    let x = residual_ffn(y_last, &last.ffn_up, &last.ffn_down)?;
    softmax_row(&vec_mat(&x, &weights.w_m)?)
}

/// Everything recorded while prefilling one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefilledLayer {
    pub index: usize,
    /// Full (uncompressed) cache with `tokens` entries per kv-head.
    pub cache: LayerKVCache,
    /// Queries of the last `window + 1` streams, per query head.
    pub queries: Vec<Vec<Vec<f64>>>,
    /// Attention rows of the last `window` streams, per query head.
    pub recent: Vec<RecentAttention>,
    /// Full causal attention `[head][stream][position]`, only when requested.
    pub full_attention: Option<Vec<Vec<Vec<f64>>>>,
    pub w_o: Mat,
    pub ffn_up: Mat,
    pub ffn_down: Mat,
}

impl PrefilledLayer {
    /// Rebuilds a layer from stored tensors, recomputing the recent-window
    /// attention from the stored queries.
    pub fn from_parts(
        index: usize,
        cache: LayerKVCache,
        queries: Vec<Vec<Vec<f64>>>,
        w_o: Mat,
        ffn_up: Mat,
        ffn_down: Mat,
    ) -> Result<Self> {
        let n = cache.seq_len();
        let w = cache.window();
        ensure!(n > w, Config, "cache of {n} entries has nothing outside window {w}");
        ensure!(queries.len().is_multiple_of(cache.kv_heads()), Dimension, "query heads not divisible by kv-heads");
        let group = queries.len() / cache.kv_heads();
        let scale = 1.0 / (cache.head_dim() as f64).sqrt();
        let recent = queries
            .iter()
            .enumerate()
            .map(|(h, qs)| {
                ensure!(qs.len() == w + 1, Dimension, "expected {} recent queries, got {}", w + 1, qs.len());
                let rows = (0..w)
                    .map(|j| {
                        let pos = n - w + j;
                        let mut row = attend_head(&qs[j + 1], cache.head(h / group), pos + 1, scale)?;
                        row.resize(n, 0.0);
                        Ok(row)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(RecentAttention::new(rows))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PrefilledLayer { index, cache, queries, recent, full_attention: None, w_o, ffn_up, ffn_down })
    }

    pub fn tokens(&self) -> usize {
        self.cache.seq_len()
    }

    pub fn heads(&self) -> usize {
        self.queries.len()
    }

    pub fn group_size(&self) -> usize {
        self.heads() / self.cache.kv_heads()
    }

    /// Query of the current (last) stream for each head.
    pub fn last_queries(&self) -> Vec<&[f64]> {
        self.queries.iter().map(|qs| qs.last().expect("recent queries are non-empty").as_slice()).collect()
    }

    /// Attention of the current stream, per query head, over the full cache.
    pub fn last_attention(&self) -> Vec<&[f64]> {
        self.recent.iter().map(|r| r.rows().last().expect("window is non-empty").as_slice()).collect()
    }
}

/// Residual-stream inputs `x[i][l]` for every stream `i` and layer `l`
/// (index `L` holds the final outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStream {
    pub x: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrefillOptions {
    /// Keep the full N x N attention of every head (needed for accumulated scores).
    pub keep_full_attention: bool,
}

/// Layer-by-layer causal prefill.
pub struct Prefiller<'a> {
    weights: &'a ModelWeights,
    streams: Vec<Vec<f64>>,
    next: usize,
    options: PrefillOptions,
}

impl<'a> Prefiller<'a> {
    pub fn new(weights: &'a ModelWeights, inputs: Vec<Vec<f64>>, options: PrefillOptions) -> Result<Self> {
        let cfg = &weights.config;
        cfg.validate()?;
        cfg.validate_tokens(inputs.len())?;
        ensure!(
            inputs.iter().all(|x| x.len() == cfg.model_dim()),
            Dimension,
            "inputs must have model dimension {}",
            cfg.model_dim()
        );
        Ok(Prefiller { weights, streams: inputs, next: 0, options })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn tokens(&self) -> usize {
        self.streams.len()
    }

    /// Inputs of the layer that will be prefilled next.
    pub fn current_streams(&self) -> &[Vec<f64>] {
        &self.streams
    }

    pub fn next_layer(&mut self) -> Result<Option<PrefilledLayer>> {
        let cfg = &self.weights.config;
        if self.next >= cfg.layers {
            return Ok(None);
        }
        let lw = &self.weights.layers[self.next];
        let n = self.streams.len();
        let w = cfg.window;
        let mut cache = LayerKVCache::new(cfg.kv_heads, cfg.head_dim, w);
        let mut queries = vec![Vec::with_capacity(w + 1); cfg.heads];
        let mut recent_rows = vec![Vec::with_capacity(w); cfg.heads];
        let mut full = self.options.keep_full_attention.then(|| vec![Vec::with_capacity(n); cfg.heads]);
        let mut outputs = Vec::with_capacity(n);
        for (i, x) in self.streams.iter().enumerate() {
            let (ks, vs) = project_kv(x, lw, cfg.head_dim)?;
            for (h, (k, v)) in ks.iter().zip(&vs).enumerate() {
                cache.append_kv(h, k, v)?;
            }
            let step = layer_forward(x, &cache, lw, cfg)?;
            if i + w + 1 >= n {
                for (h, q) in project_queries(x, lw, cfg.head_dim)?.into_iter().enumerate() {
                    queries[h].push(q);
                }
            }
            for (h, row) in step.attention.iter().enumerate() {
                let mut padded = row.clone();
                padded.resize(n, 0.0);
                if i + w >= n {
                    recent_rows[h].push(padded.clone());
                }
                if let Some(full) = full.as_mut() {
                    full[h].push(padded);
                }
            }
            outputs.push(step.x_next);
        }
        self.streams = outputs;
        let layer = PrefilledLayer {
            index: self.next,
            cache,
            queries,
            recent: recent_rows.into_iter().map(RecentAttention::new).collect(),
            full_attention: full,
            w_o: lw.w_o.clone(),
            ffn_up: lw.ffn_up.clone(),
            ffn_down: lw.ffn_down.clone(),
        };
        self.next += 1;
        Ok(Some(layer))
    }
}

/// Complete prefill result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefill {
    pub layers: Vec<PrefilledLayer>,
    pub hidden: HiddenStream,
}

impl Prefill {
    pub fn caches(&self) -> Vec<&LayerKVCache> {
        self.layers.iter().map(|l| &l.cache).collect()
    }
}

pub fn prefill(weights: &ModelWeights, inputs: &[Vec<f64>], options: PrefillOptions) -> Result<Prefill> {
    let mut pf = Prefiller::new(weights, inputs.to_vec(), options)?;
    let mut hidden: Vec<Vec<Vec<f64>>> = inputs.iter().map(|x| vec![x.clone()]).collect();
    let mut layers = Vec::with_capacity(weights.config.layers);
    while let Some(layer) = pf.next_layer()? {
        for (slot, x) in hidden.iter_mut().zip(pf.current_streams()) {
            slot.push(x.clone());
        }
        layers.push(layer);
    }
    Ok(Prefill { layers, hidden: HiddenStream { x: hidden } })
}

/// Everything needed to evaluate eviction offline; mirrors the trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub layers: Vec<PrefilledLayer>,
    pub w_m: Mat,
}

impl ModelSnapshot {
    pub fn from_prefill(weights: &ModelWeights, prefill: Prefill) -> Self {
        ModelSnapshot { config: weights.config.clone(), layers: prefill.layers, w_m: weights.w_m.clone() }
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, PrefilledLayer::tokens)
    }
}

/// Builds the model, draws inputs and prefills every layer.
pub fn synthetic_snapshot(cfg: &ModelConfig, tokens: usize, options: PrefillOptions) -> Result<ModelSnapshot> {
    let weights = init_random_model(cfg)?;
    let inputs = synthetic_inputs(cfg, tokens);
    let pf = prefill(&weights, &inputs, options)?;
    Ok(ModelSnapshot::from_prefill(&weights, pf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, heads: usize, kv: usize, dh: usize, w: usize, seed: u64) -> ModelConfig {
        ModelConfig::new(layers, heads, kv, dh, w).with_seed(seed).with_vocab(11)
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1, 4, 3, 2, 1, 0).validate().is_err());
        assert!(cfg(0, 2, 1, 2, 1, 0).validate().is_err());
        assert!(cfg(1, 2, 1, 2, 0, 0).validate().is_err());
        assert!(cfg(1, 2, 1, 2, 1, 0).with_value_spread(0.5).validate().is_err());
        assert!(matches!(init_random_model(&cfg(1, 4, 3, 2, 1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_random_model(&cfg(2, 2, 1, 4, 2, 7)).unwrap();
        let b = init_random_model(&cfg(2, 2, 1, 4, 2, 7)).unwrap();
        let c = init_random_model(&cfg(2, 2, 1, 4, 2, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers[0].w_q, c.layers[0].w_q);
    }

    #[test]
    fn init_entries_are_centered() {
        // d = 16; first 10^4 drawn entries across the weight matrices
        let c = cfg(4, 4, 4, 4, 1, 3);
        let m = init_random_model(&c).unwrap();
        let d = c.model_dim() as f64;
        let entries: Vec<f64> = m
            .layers
            .iter()
            .flat_map(|l| l.w_q.data().iter().chain(l.w_k.data()).chain(l.w_v.data()).chain(l.w_o.data()).chain(l.ffn_up.data()).chain(l.ffn_down.data()))
            .copied()
            .take(10_000)
            .collect();
        assert_eq!(entries.len(), 10_000);
        let mean = entries.iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 3.0 / (100.0 * 3f64.sqrt() * d.sqrt()), "mean {mean}");
        assert!(entries.iter().all(|x| x.abs() <= 1.0 / d.sqrt()));
    }

    #[test]
    fn value_spread_only_rescales_value_blocks() {
        let base = init_random_model(&cfg(2, 4, 2, 3, 1, 5)).unwrap();
        let spread = init_random_model(&cfg(2, 4, 2, 3, 1, 5).with_value_spread(4.0)).unwrap();
        assert_eq!(base.layers[1].w_q, spread.layers[1].w_q);
        assert_eq!(base.w_m, spread.w_m);
        for l in 0..2 {
            for h in 0..2 {
                let g = spread.layers[l].w_v.get(0, h * 3) / base.layers[l].w_v.get(0, h * 3);
                assert!((0.25..=4.0).contains(&g));
                for r in 0..12 {
                    for c in h * 3..h * 3 + 3 {
                        let want = base.layers[l].w_v.get(r, c) * g;
                        assert!((spread.layers[l].w_v.get(r, c) - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_step_examples() {
        let keys = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 1.0]];
        let u = attention_step(&[0.0, 0.0], &keys, 0.7).unwrap();
        assert!(u.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(attention_step(&[0.3, 0.1], &keys[..1], 0.7).unwrap(), vec![1.0]);
        assert!(matches!(attention_step(&[0.3], &keys, 1.0), Err(Error::Dimension(_))));
        let q = [0.4, -1.2];
        let got = attention_step(&q, &keys, 0.5).unwrap();
        let ex: Vec<f64> = keys.iter().map(|k| ((q[0] * k[0] + q[1] * k[1]) * 0.5).exp()).collect();
        let z: f64 = ex.iter().sum();
        for (g, e) in got.iter().zip(&ex) {
            assert!((g - e / z).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_forward_annihilates_with_zero_weights() {
        let c = cfg(1, 2, 1, 2, 1, 0);
        let mut m = init_random_model(&c).unwrap();
        for lw in &mut m.layers {
            for w in [&mut lw.w_q, &mut lw.w_k, &mut lw.w_v, &mut lw.w_o, &mut lw.ffn_up, &mut lw.ffn_down] {
                w.scale(0.0);
            }
        }
        let mut cache = LayerKVCache::new(1, 2, 1);
        cache.append_kv(0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let step = layer_forward(&[1.0, 2.0, 3.0, 4.0], &cache, &m.layers[0], &c).unwrap();
        assert!(step.y.iter().chain(&step.x_next).all(|&v| v == 0.0));
    }

    #[test]
    fn layer_forward_singleton_attention() {
        let c = cfg(1, 1, 1, 3, 1, 2);
        let m = init_random_model(&c).unwrap();
        let v = vec![0.5, -1.0, 2.0];
        let mut cache = LayerKVCache::new(1, 3, 1);
        cache.append_kv(0, &[1.0, 1.0, 1.0], &v).unwrap();
        let step = layer_forward(&[0.1, 0.2, 0.3], &cache, &m.layers[0], &c).unwrap();
        assert_eq!(step.attention, vec![vec![1.0]]);
        let want = vec_mat(&v, &m.layers[0].w_o).unwrap();
        assert_eq!(step.y, want);
        let empty = LayerKVCache::new(1, 3, 1);
        assert!(matches!(layer_forward(&[0.1, 0.2, 0.3], &empty, &m.layers[0], &c), Err(Error::State(_))));
    }

    #[test]
    fn layer_forward_matches_straight_line_oracle() {
        let c = cfg(1, 4, 2, 3, 2, 13);
        let m = init_random_model(&c).unwrap();
        let lw = &m.layers[0];
        let xs = synthetic_inputs(&c, 5);
        let mut cache = LayerKVCache::new(2, 3, 2);
        for x in &xs {
            let (ks, vs) = project_kv(x, lw, 3).unwrap();
            for h in 0..2 {
                cache.append_kv(h, &ks[h], &vs[h]).unwrap();
            }
        }
        let x = &xs[4];
        let step = layer_forward(x, &cache, lw, &c).unwrap();
        // oracle: explicit loops over the weight entries
        let d = 12;
        let mut cat = vec![0.0; d];
        for h in 0..4 {
            let g = h / 2;
            let q: Vec<f64> = (0..3).map(|j| (0..d).map(|r| x[r] * lw.w_q.get(r, h * 3 + j)).sum()).collect();
            let kv: Vec<(Vec<f64>, Vec<f64>)> = xs
                .iter()
                .map(|xi| {
                    let k = (0..3).map(|j| (0..d).map(|r| xi[r] * lw.w_k.get(r, g * 3 + j)).sum()).collect();
                    let v = (0..3).map(|j| (0..d).map(|r| xi[r] * lw.w_v.get(r, g * 3 + j)).sum()).collect();
                    (k, v)
                })
                .collect();
            let logits: Vec<f64> =
                kv.iter().map(|(k, _)| (0..3).map(|j| q[j] * k[j]).sum::<f64>() / 3f64.sqrt()).collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (l, (_, v)) in logits.iter().zip(&kv) {
                let a = (l - mx).exp() / z;
                for j in 0..3 {
                    cat[h * 3 + j] += a * v[j];
                }
            }
        }
        for c_ in 0..d {
            let y: f64 = (0..d).map(|r| cat[r] * lw.w_o.get(r, c_)).sum();
            assert!((y - step.y[c_]).abs() <= 1e-10);
        }
    }

    #[test]
    fn forward_logits_examples() {
        let mut m = init_random_model(&cfg(1, 2, 2, 2, 1, 4)).unwrap();
        let y = vec![0.3, -0.2, 0.9, 0.1];
        let p = forward_logits(&y, &m).unwrap();
        // oracle: compose the pieces by hand
        let lw = &m.layers[0];
        let mut h: Vec<f64> = (0..16).map(|c| (0..4).map(|r| y[r] * lw.ffn_up.get(r, c)).sum::<f64>().max(0.0)).collect();
        let f: Vec<f64> = (0..4).map(|c| (0..16).map(|r| h[r] * lw.ffn_down.get(r, c)).sum()).collect();
        h.clear();
        let x: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a + b).collect();
        let logits: Vec<f64> = (0..11).map(|c| (0..4).map(|r| x[r] * m.w_m.get(r, c)).sum()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (pi, l) in p.iter().zip(&logits) {
            assert!((pi - l.exp() / z).abs() < 1e-14);
        }
        m.w_m.scale(0.0);
        let u = forward_logits(&y, &m).unwrap();
        assert!(u.iter().all(|x| (x - 1.0 / 11.0).abs() < 1e-15));
        let m1 = init_random_model(&cfg(1, 2, 2, 2, 1, 4).with_vocab(1)).unwrap();
        assert_eq!(forward_logits(&y, &m1).unwrap(), vec![1.0]);
    }

    #[test]
    fn prefill_minimal_sequence() {
        let c = cfg(2, 2, 1, 2, 3, 1);
        let snap = synthetic_snapshot(&c, 4, PrefillOptions::default()).unwrap();
        for layer in &snap.layers {
            assert_eq!(layer.cache.scored_len(), 1);
            assert_eq!(layer.recent[0].rows().len(), 3);
            assert_eq!(layer.queries[0].len(), 4);
        }
        assert!(matches!(synthetic_snapshot(&c, 3, PrefillOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn prefill_is_deterministic() {
        let c = cfg(2, 2, 2, 3, 2, 42);
        let a = synthetic_snapshot(&c, 9, PrefillOptions::default()).unwrap();
        let b = synthetic_snapshot(&c, 9, PrefillOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    /// All-at-once prefill: materialize Q K^T with a causal mask per head.
    #[test]
    fn prefill_matches_full_matrix_reference() {
        let c = cfg(2, 2, 2, 3, 2, 77);
        let m = init_random_model(&c).unwrap();
        let inputs = synthetic_inputs(&c, 8);
        let pf = prefill(&m, &inputs, PrefillOptions { keep_full_attention: true }).unwrap();
        let mut x = Mat::from_rows(&inputs).unwrap();
        for (l, lw) in m.layers.iter().enumerate() {
            let q = crate::numerics::matmul(&x, &lw.w_q).unwrap();
            let k = crate::numerics::matmul(&x, &lw.w_k).unwrap();
            let v = crate::numerics::matmul(&x, &lw.w_v).unwrap();
            let mut cat = Mat::zeros(8, 6);
            for h in 0..2 {
                let mut scores = Mat::zeros(8, 8);
                for i in 0..8 {
                    for j in 0..8 {
                        let s = if j <= i {
                            (0..3).map(|t| q.get(i, h * 3 + t) * k.get(j, h * 3 + t)).sum::<f64>() / 3f64.sqrt()
                        } else {
                            f64::NEG_INFINITY
                        };
                        scores.set(i, j, s);
                    }
                }
                for i in 0..8 {
                    let mx = (0..=i).map(|j| scores.get(i, j)).fold(f64::MIN, f64::max);
                    let z: f64 = (0..=i).map(|j| (scores.get(i, j) - mx).exp()).sum();
                    for j in 0..8 {
                        let a = if j <= i { (scores.get(i, j) - mx).exp() / z } else { 0.0 };
                        let got = pf.layers[l].full_attention.as_ref().unwrap()[h][i][j];
                        assert!((got - a).abs() <= 1e-12);
                        for t in 0..3 {
                            let cur = cat.get(i, h * 3 + t);
                            cat.set(i, h * 3 + t, cur + a * v.get(j, h * 3 + t));
                        }
                    }
                }
                for j in 0..8 {
                    for t in 0..3 {
                        assert!((pf.layers[l].cache.head(h).keys()[j][t] - k.get(j, h * 3 + t)).abs() <= 1e-12);
                        assert!((pf.layers[l].cache.head(h).values()[j][t] - v.get(j, h * 3 + t)).abs() <= 1e-12);
                    }
                }
            }
            let y = crate::numerics::matmul(&cat, &lw.w_o).unwrap();
            let next: Vec<Vec<f64>> =
                (0..8).map(|i| residual_ffn(y.row(i), &lw.ffn_up, &lw.ffn_down).unwrap()).collect();
            for i in 0..8 {
                for t in 0..6 {
                    assert!((pf.hidden.x[i][l + 1][t] - next[i][t]).abs() <= 1e-10);
                }
            }
            x = Mat::from_rows(&next).unwrap();
        }
    }

    #[test]
    fn prefill_is_causal() {
        let c = cfg(2, 2, 1, 2, 2, 9);
        let m = init_random_model(&c).unwrap();
        let mut inputs = synthetic_inputs(&c, 7);
        let a = prefill(&m, &inputs, PrefillOptions::default()).unwrap();
        inputs[5][0] += 1.0;
        let b = prefill(&m, &inputs, PrefillOptions::default()).unwrap();
        for l in 0..2 {
            for i in 0..5 {
                assert_eq!(a.layers[l].cache.head(0).keys()[i], b.layers[l].cache.head(0).keys()[i]);
                assert_eq!(a.layers[l].cache.head(0).values()[i], b.layers[l].cache.head(0).values()[i]);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions_and_gqa_shaped() {
        let c = cfg(2, 4, 2, 2, 3, 12);
        let snap = synthetic_snapshot(&c, 10, PrefillOptions { keep_full_attention: true }).unwrap();
        for layer in &snap.layers {
            assert_eq!(layer.cache.kv_heads(), 2);
            assert_eq!(layer.recent.len(), 4);
            for rows in layer.full_attention.as_ref().unwrap() {
                for row in rows {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn rebuilt_recent_attention_matches_recorded() {
        let c = cfg(1, 4, 2, 3, 3, 31);
        let snap = synthetic_snapshot(&c, 12, PrefillOptions::default()).unwrap();
        let l = &snap.layers[0];
        let rebuilt = PrefilledLayer::from_parts(
            0,
            l.cache.clone(),
            l.queries.clone(),
            l.w_o.clone(),
            l.ffn_up.clone(),
            l.ffn_down.clone(),
        )
        .unwrap();
        assert_eq!(rebuilt.recent, l.recent);
    }
}
