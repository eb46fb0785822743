//! Layer and head budget allocation.
//!
//! Real-valued shares are turned into integers by [`apportion`]: entries
//! are clamped into `[floor, cap]` by water-filling, then rounded with the
//! largest-remainder rule (ties go to the lower index). The result always
//! sums to the requested total.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::numerics::{rank_cmp, top_k_indices};
use crate::scoring::RecentAttention;

/// Floor applied to the CAKE statistics before exponentiation.
pub const CAKE_STAT_FLOOR: f64 = 1e-12;

/// Per-layer bounds on an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetLimits {
    pub floor: usize,
    pub cap: usize,
}

impl BudgetLimits {
    /// Floor of `kv_heads * window` (the recent window) and cap of
    /// `kv_heads * tokens` (everything the layer holds).
    pub fn for_layer(kv_heads: usize, window: usize, tokens: usize) -> Self {
        BudgetLimits { floor: kv_heads * window, cap: kv_heads * tokens }
    }

    pub fn floor_only(floor: usize) -> Self {
        BudgetLimits { floor, cap: usize::MAX }
    }

    pub fn check(&self, total: usize, parts: usize) -> Result<()> {
        ensure!(parts > 0, Config, "allocation over zero layers");
        let need = self.floor.saturating_mul(parts);
        ensure!(total >= need, Infeasible, "budget {total} is below the window floor {need}");
        let room = self.cap.saturating_mul(parts);
        ensure!(total <= room, Infeasible, "budget {total} exceeds the cache size {room}");
        Ok(())
    }
}

/// Splits `total` in proportion to `weights` within `limits`.
///
/// All-zero weights split evenly. Rounded values never move more than one
/// unit away from the clamped real shares.
pub fn apportion(weights: &[f64], total: usize, limits: BudgetLimits) -> Result<Vec<usize>> {
    let n = weights.len();
    limits.check(total, n)?;
    ensure!(
        weights.iter().all(|w| *w >= 0.0 && w.is_finite()),
        Domain,
        "allocation weights must be finite and non-negative"
    );
    let shares = water_fill(weights, total as f64, limits.floor as f64, limits.cap as f64);
    Ok(round_largest_remainder(&shares, total, limits))
}

#[derive(Clone, Copy, PartialEq)]
enum Slot {
    Free,
    Fixed(f64),
}

/// Proportional split with entries pinned at `floor` or `cap` once they fall outside.
///
/// Floors are settled first; settling caps afterwards only raises the
/// remaining shares, so the two phases never interfere.
fn water_fill(weights: &[f64], total: f64, floor: f64, cap: f64) -> Vec<f64> {
    let n = weights.len();
    let mut slots = vec![Slot::Free; n];
    let shares = |slots: &[Slot]| -> Vec<f64> {
        let fixed: f64 = slots.iter().map(|s| if let Slot::Fixed(v) = s { *v } else { 0.0 }).sum();
        let free: Vec<usize> = (0..n).filter(|&i| slots[i] == Slot::Free).collect();
        let remaining = total - fixed;
        let mass: f64 = free.iter().map(|&i| weights[i]).sum();
        let mut out: Vec<f64> = slots.iter().map(|s| if let Slot::Fixed(v) = s { *v } else { 0.0 }).collect();
        for &i in &free {
            out[i] = if mass > 0.0 {
                remaining * weights[i] / mass
            } else {
                remaining / free.len() as f64
            };
        }
        out
    };
    for pin_floor in [true, false] {
        loop {
            let x = shares(&slots);
            let mut changed = false;
            for i in 0..n {
                if slots[i] != Slot::Free {
                    continue;
                }
                if pin_floor && x[i] < floor {
                    slots[i] = Slot::Fixed(floor);
                    changed = true;
                } else if !pin_floor && x[i] > cap {
                    slots[i] = Slot::Fixed(cap);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    shares(&slots)
}

fn round_largest_remainder(shares: &[f64], total: usize, limits: BudgetLimits) -> Vec<usize> {
    let n = shares.len();
    let mut out: Vec<usize> = shares
        .iter()
        .map(|x| (x.floor().max(0.0) as usize).clamp(limits.floor, limits.cap))
        .collect();
    let frac: Vec<f64> = shares.iter().zip(&out).map(|(x, &b)| x - b as f64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rank_cmp(&frac, a, b));
    let mut assigned: usize = out.iter().sum();
    // Rounding residue can exceed one pass only through float error; loop until exact.
    while assigned < total {
        for &i in &order {
            if assigned == total {
                break;
            }
            if out[i] < limits.cap {
                out[i] += 1;
                assigned += 1;
            }
        }
    }
    while assigned > total {
        for &i in order.iter().rev() {
            if assigned == total {
                break;
            }
            if out[i] > limits.floor {
                out[i] -= 1;
                assigned -= 1;
            }
        }
    }
    out
}

/// `floor(B/L)` per layer, remainder to the lowest indices.
pub fn uniform_layer_budgets(total: usize, layers: usize, limits: BudgetLimits) -> Result<Vec<usize>> {
    apportion(&vec![1.0; layers], total, limits)
}

/// Real-valued pyramid shares: `B_{L-1} = B/(βL)`, `B_0 = 2B/L - B_{L-1}`,
/// linear in between.
pub fn pyramid_shares(total: usize, layers: usize, beta: f64) -> Result<Vec<f64>> {
    ensure!(layers > 0, Config, "allocation over zero layers");
    ensure!(beta >= 1.0 && beta.is_finite(), Config, "pyramid beta must be at least 1, got {beta}");
    let b = total as f64;
    let l = layers as f64;
    if layers == 1 {
        return Ok(vec![b]);
    }
    let last = b / (beta * l);
    let first = 2.0 * b / l - last;
    let step = (first - last) / (l - 1.0);
    Ok((0..layers).map(|i| first - i as f64 * step).collect())
}

pub fn pyramid_layer_budgets(total: usize, layers: usize, beta: f64, limits: BudgetLimits) -> Result<Vec<usize>> {
    let shares = pyramid_shares(total, layers, beta)?;
    apportion(&shares, total, limits)
}

/// Mean row entropy of the window attention, over heads and window rows.
pub fn cake_spatial(heads: &[RecentAttention], w: usize) -> Result<f64> {
    ensure!(!heads.is_empty(), State, "no attention rows");
    let mut acc = 0.0;
    let mut count = 0usize;
    for head in heads {
        let rows = head.rows();
        ensure!(rows.len() >= w && w > 0, State, "window attention rows missing");
        for row in &rows[rows.len() - w..] {
            acc += entropy(row);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Sum over scored positions of the population variance of the window
/// samples, averaged over heads.
pub fn cake_temporal(heads: &[RecentAttention], w: usize) -> Result<f64> {
    ensure!(!heads.is_empty(), State, "no attention rows");
    let mut acc = 0.0;
    for head in heads {
        let rows = head.rows();
        ensure!(rows.len() >= w && w > 0, State, "window attention rows missing");
        let rows = &rows[rows.len() - w..];
        let n = head.len();
        ensure!(n > w, State, "no scored positions");
        for i in 0..n - w {
            let samples: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            acc += crate::numerics::population_variance(&samples)?;
        }
    }
    Ok(acc / heads.len() as f64)
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// CAKE preference `P = 𝓗^{1/γ1} 𝓥^{1/γ2}`; infinite γ gives exponent 0.
pub fn cake_preferences(spatial: &[f64], temporal: &[f64], gamma1: f64, gamma2: f64) -> Result<Vec<f64>> {
    ensure!(spatial.len() == temporal.len(), Dimension, "spatial and temporal lists differ in length");
    ensure!(gamma1 != 0.0 && gamma2 != 0.0, Config, "cake gammas must be non-zero");
    ensure!(!gamma1.is_nan() && !gamma2.is_nan(), Config, "cake gammas must be numbers");
    Ok(spatial
        .iter()
        .zip(temporal)
        .map(|(&h, &v)| h.max(CAKE_STAT_FLOOR).powf(1.0 / gamma1) * v.max(CAKE_STAT_FLOOR).powf(1.0 / gamma2))
        .collect())
}

/// Budgets proportional to the CAKE preferences. The flag reports a
/// fallback to uniform when the preferences carry no mass.
pub fn cake_layer_budgets(
    spatial: &[f64],
    temporal: &[f64],
    gamma1: f64,
    gamma2: f64,
    total: usize,
    limits: BudgetLimits,
) -> Result<(Vec<usize>, bool)> {
    let p = cake_preferences(spatial, temporal, gamma1, gamma2)?;
    let mass: f64 = p.iter().sum();
    if mass > 0.0 && mass.is_finite() {
        Ok((apportion(&p, total, limits)?, false))
    } else {
        Ok((uniform_layer_budgets(total, p.len(), limits)?, true))
    }
}

/// `ŝ = s / Σs`; falls back to uniform (flag set) when the scores sum to zero.
pub fn lava_normalized_scores(scores: &[f64]) -> Result<(Vec<f64>, bool)> {
    ensure!(!scores.is_empty(), Domain, "no scores to normalize");
    ensure!(
        scores.iter().all(|s| *s >= 0.0 && s.is_finite()),
        Domain,
        "scores must be finite and non-negative"
    );
    let z: f64 = scores.iter().sum();
    if z > 0.0 {
        Ok((scores.iter().map(|s| s / z).collect(), false))
    } else {
        Ok((vec![1.0 / scores.len() as f64; scores.len()], true))
    }
}

/// Normalized entropy `-Σ ŝ ln ŝ / (H N)`.
pub fn lava_layer_entropy(normalized: &[f64], heads: usize, tokens: usize) -> Result<f64> {
    ensure!(heads > 0 && tokens > 0, Domain, "entropy normalizer must be positive");
    Ok((entropy(normalized) / (heads * tokens) as f64).max(0.0))
}

/// Budgets proportional to the layer entropies; equal split if all are zero.
pub fn entropy_layer_budgets(entropies: &[f64], total: usize, limits: BudgetLimits) -> Result<Vec<usize>> {
    apportion(entropies, total, limits)
}

/// Per-head counts of the layer-wide top scores plus `window` per head.
pub fn adakv_head_budgets(rows: &[Vec<f64>], layer_budget: usize, window: usize) -> Result<Vec<usize>> {
    let kv_heads = rows.len();
    ensure!(kv_heads > 0, Domain, "no heads");
    let floor = kv_heads * window;
    ensure!(layer_budget >= floor, Infeasible, "layer budget {layer_budget} below window floor {floor}");
    let quota = layer_budget - floor;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    ensure!(quota <= flat.len(), Infeasible, "quota {quota} exceeds {} scored entries", flat.len());
    let mut counts = vec![window; kv_heads];
    let offsets: Vec<usize> = rows
        .iter()
        .scan(0, |acc, r| {
            let start = *acc;
            *acc += r.len();
            Some(start)
        })
        .collect();
    for idx in top_k_indices(&flat, quota)? {
        let head = offsets.partition_point(|&o| o <= idx) - 1;
        counts[head] += 1;
    }
    Ok(counts)
}

/// Layer-level allocation strategies by wire name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerAllocation {
    Uniform,
    Pyramid { beta: f64 },
    Cake { gamma1: f64, gamma2: f64 },
    LavaEntropy,
}

impl LayerAllocation {
    pub fn name(&self) -> &'static str {
        match self {
            LayerAllocation::Uniform => "uniform",
            LayerAllocation::Pyramid { .. } => "pyramid",
            LayerAllocation::Cake { .. } => "cake",
            LayerAllocation::LavaEntropy => "lava-entropy",
        }
    }

    /// Dynamic strategies depend on statistics gathered during prefill.
    pub fn is_dynamic(&self) -> bool {
        matches!(self, LayerAllocation::Cake { .. } | LayerAllocation::LavaEntropy)
    }

    /// Budgets of a static strategy.
    pub fn static_budgets(&self, total: usize, layers: usize, limits: BudgetLimits) -> Result<Vec<usize>> {
        match *self {
            LayerAllocation::Uniform => uniform_layer_budgets(total, layers, limits),
            LayerAllocation::Pyramid { beta } => pyramid_layer_budgets(total, layers, beta, limits),
            _ => Err(Error::Config(format!("{} allocation needs prefill statistics", self.name()))),
        }
    }
}

impl fmt::Display for LayerAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerAllocation {
    type Err = Error;

    /// Parses a wire name with default parameters (`β = 2`, `γ1 = γ2 = 1`).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => LayerAllocation::Uniform,
            "pyramid" => LayerAllocation::Pyramid { beta: 2.0 },
            "cake" => LayerAllocation::Cake { gamma1: 1.0, gamma2: 1.0 },
            "lava-entropy" => LayerAllocation::LavaEntropy,
            other => return Err(Error::Config(format!("unknown allocation strategy `{other}`"))),
        })
    }
}
