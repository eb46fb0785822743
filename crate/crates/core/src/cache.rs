//! Per-layer KV storage with logical eviction.
//!
//! Eviction never moves data: it clears retention flags, and every reader
//! (attention, scoring, metrics) skips entries whose flag is clear. The
//! last `window` positions of every head are retained at all times.

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    retained: Vec<bool>,
    scores: Vec<Option<f64>>,
}

impl HeadCache {
    fn new() -> Self {
        HeadCache { keys: Vec::new(), values: Vec::new(), retained: Vec::new(), scores: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    /// Stored eviction score of a retained, non-window entry.
    pub fn score(&self, pos: usize) -> Option<f64> {
        self.scores.get(pos).copied().flatten()
    }
}

/// KV cache of one layer: one [`HeadCache`] per kv-head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache {
    head_dim: usize,
    window: usize,
    heads: Vec<HeadCache>,
}

/// Retention bits per (kv-head, position).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EvictionMask {
    bits: Vec<Vec<bool>>,
}

impl EvictionMask {
    pub fn from_bits(bits: Vec<Vec<bool>>) -> Self {
        EvictionMask { bits }
    }

    pub fn all_ones(kv_heads: usize, len: usize) -> Self {
        EvictionMask { bits: vec![vec![true; len]; kv_heads] }
    }

    /// Keeps only the most recent `window` positions of every head.
    pub fn window_only(kv_heads: usize, len: usize, window: usize) -> Self {
        let row: Vec<bool> = (0..len).map(|i| i + window >= len).collect();
        EvictionMask { bits: vec![row; kv_heads] }
    }

    pub fn kv_heads(&self) -> usize {
        self.bits.len()
    }

    pub fn head(&self, h: usize) -> &[bool] {
        &self.bits[h]
    }

    pub fn get(&self, h: usize, pos: usize) -> bool {
        self.bits[h][pos]
    }

    pub fn set(&mut self, h: usize, pos: usize, keep: bool) {
        self.bits[h][pos] = keep;
    }

    pub fn retained_count(&self) -> usize {
        self.bits.iter().map(|row| row.iter().filter(|&&b| b).count()).sum()
    }

    pub fn per_head_counts(&self) -> Vec<usize> {
        self.bits.iter().map(|row| row.iter().filter(|&&b| b).count()).collect()
    }

    pub fn bits(&self) -> &[Vec<bool>] {
        &self.bits
    }
}

/// Realized budgets of a compression run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetPlan {
    pub total: usize,
    pub per_layer: Vec<usize>,
    pub per_head: Vec<Vec<usize>>,
}

impl BudgetPlan {
    /// Checks conservation (`Σ_l = total`, `Σ_h = per_layer[l]`) and the window floor.
    pub fn validate(&self, kv_heads: usize, window: usize) -> Result<()> {
        ensure!(
            self.per_layer.iter().sum::<usize>() == self.total,
            Constraint,
            "layer budgets sum to {} instead of {}",
            self.per_layer.iter().sum::<usize>(),
            self.total
        );
        ensure!(self.per_head.len() == self.per_layer.len(), Dimension, "per-head plan misses layers");
        for (l, (heads, &layer)) in self.per_head.iter().zip(&self.per_layer).enumerate() {
            ensure!(
                heads.iter().sum::<usize>() == layer,
                Constraint,
                "layer {l}: head budgets sum to {} instead of {layer}",
                heads.iter().sum::<usize>()
            );
            ensure!(
                layer >= kv_heads * window,
                Constraint,
                "layer {l}: budget {layer} below window floor {}",
                kv_heads * window
            );
        }
        Ok(())
    }
}

impl LayerKVCache {
    pub fn new(kv_heads: usize, head_dim: usize, window: usize) -> Self {
        LayerKVCache { head_dim, window, heads: (0..kv_heads).map(|_| HeadCache::new()).collect() }
    }

    pub fn kv_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn head(&self, h: usize) -> &HeadCache {
        &self.heads[h]
    }

    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }

    /// Sequence length, taken from head 0 (heads advance in lockstep in the model).
    pub fn seq_len(&self) -> usize {
        self.heads.first().map_or(0, HeadCache::len)
    }

    /// Positions outside the recent window: `0..seq_len - window`.
    pub fn scored_len(&self) -> usize {
        self.seq_len().saturating_sub(self.window)
    }

    pub fn append_kv(&mut self, head: usize, k: &[f64], v: &[f64]) -> Result<()> {
        ensure!(head < self.heads.len(), Dimension, "kv-head {head} out of range");
        ensure!(
            k.len() == self.head_dim && v.len() == self.head_dim,
            Dimension,
            "expected head dim {}, got k={} v={}",
            self.head_dim,
            k.len(),
            v.len()
        );
        let hc = &mut self.heads[head];
        hc.keys.push(k.to_vec());
        hc.values.push(v.to_vec());
        hc.retained.push(true);
        hc.scores.push(None);
        Ok(())
    }

    /// Replaces key/value of an existing entry (used when a decode step
    /// recomputes its own projections).
    pub(crate) fn overwrite(&mut self, head: usize, pos: usize, k: &[f64], v: &[f64]) {
        let hc = &mut self.heads[head];
        hc.keys[pos].copy_from_slice(k);
        hc.values[pos].copy_from_slice(v);
    }

    pub fn is_retained(&self, head: usize, pos: usize) -> bool {
        self.heads[head].retained[pos]
    }

    pub fn retained_count(&self) -> usize {
        self.heads.iter().map(|h| h.retained.iter().filter(|&&b| b).count()).sum()
    }

    pub fn mask(&self) -> EvictionMask {
        EvictionMask { bits: self.heads.iter().map(|h| h.retained.clone()).collect() }
    }

    /// Sets the retention flags to `mask`.
    ///
    /// A mask may only clear flags: window positions must stay set and an
    /// evicted entry cannot come back.
    pub fn apply_mask(&mut self, mask: &EvictionMask) -> Result<()> {
        ensure!(
            mask.bits.len() == self.heads.len(),
            Dimension,
            "mask covers {} kv-heads, cache has {}",
            mask.bits.len(),
            self.heads.len()
        );
        for (h, (hc, bits)) in self.heads.iter().zip(&mask.bits).enumerate() {
            ensure!(
                bits.len() == hc.len(),
                Dimension,
                "mask row {h} has {} bits for {} entries",
                bits.len(),
                hc.len()
            );
            let window_start = hc.len().saturating_sub(self.window);
            for (pos, (&keep, &was)) in bits.iter().zip(&hc.retained).enumerate() {
                ensure!(
                    keep || pos < window_start,
                    Constraint,
                    "mask evicts window position {pos} of kv-head {h}"
                );
                ensure!(!keep || was, Constraint, "mask resurrects evicted position {pos} of kv-head {h}");
            }
        }
        for (hc, bits) in self.heads.iter_mut().zip(&mask.bits) {
            hc.retained.copy_from_slice(bits);
            for (score, &keep) in hc.scores.iter_mut().zip(bits) {
                if !keep {
                    *score = None;
                }
            }
        }
        Ok(())
    }

    /// Stores scores for retained non-window entries; `rows[h]` covers positions `0..scored_len`.
    pub fn record_scores(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        ensure!(rows.len() == self.heads.len(), Dimension, "score rows do not match kv-heads");
        let scored = self.scored_len();
        for (hc, row) in self.heads.iter_mut().zip(rows) {
            ensure!(row.len() == scored, Dimension, "score row has {} entries, expected {scored}", row.len());
            for pos in 0..hc.len() {
                hc.scores[pos] = (pos < scored && hc.retained[pos]).then(|| row[pos]);
            }
        }
        Ok(())
    }

    /// Score rows rebuilt from the sidecar; evicted entries read as `None`.
    pub fn stored_scores(&self) -> Vec<Vec<Option<f64>>> {
        let scored = self.scored_len();
        self.heads.iter().map(|hc| hc.scores[..scored].to_vec()).collect()
    }

    /// Physically rebuilt cache holding only retained entries.
    pub fn compacted(&self) -> LayerKVCache {
        let heads = self
            .heads
            .iter()
            .map(|hc| {
                let keep: Vec<usize> = (0..hc.len()).filter(|&i| hc.retained[i]).collect();
                HeadCache {
                    keys: keep.iter().map(|&i| hc.keys[i].clone()).collect(),
                    values: keep.iter().map(|&i| hc.values[i].clone()).collect(),
                    retained: vec![true; keep.len()],
                    scores: keep.iter().map(|&i| hc.scores[i]).collect(),
                }
            })
            .collect();
        LayerKVCache { head_dim: self.head_dim, window: self.window, heads }
    }
}
