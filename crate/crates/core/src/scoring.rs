//! Token-importance scores.
//!
//! Every window-based score reads the attention rows of the last `w`
//! streams and returns one value per scored position `0..N-w` (the
//! positions outside the recent window). `h2o_score` and `tova_score`
//! return full-length rows; callers slice off the window.

use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::numerics::{l1_norm, maxpool1d, population_variance};

/// Attention rows of the recent window for one query head; each row spans
/// all `N` positions (zero beyond the causal horizon).
#[derive(Debug, Clone, PartialEq)]
pub struct RecentAttention {
    rows: Vec<Vec<f64>>,
}

impl RecentAttention {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        RecentAttention { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Sequence length covered by the rows.
    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The last `w` rows, checking they exist and leave a scored prefix.
    fn window(&self, w: usize) -> Result<&[Vec<f64>]> {
        ensure!(w >= 1, Config, "window must be at least 1");
        ensure!(
            self.rows.len() >= w,
            State,
            "{} recent rows available, window needs {w}",
            self.rows.len()
        );
        let n = self.len();
        ensure!(self.rows.iter().all(|r| r.len() == n), Dimension, "ragged attention rows");
        ensure!(n > w, State, "no scored positions: {n} tokens, window {w}");
        Ok(&self.rows[self.rows.len() - w..])
    }

    /// Sum of the window rows over scored positions.
    fn window_sums(&self, w: usize) -> Result<Vec<f64>> {
        let rows = self.window(w)?;
        let scored = self.len() - w;
        let mut acc = vec![0.0; scored];
        for row in rows {
            for (a, x) in acc.iter_mut().zip(&row[..scored]) {
                *a += x;
            }
        }
        Ok(acc)
    }
}

/// Scores of one layer on kv-head granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub rows: Vec<Vec<f64>>,
}

impl ScoreTensor {
    pub fn kv_heads(&self) -> usize {
        self.rows.len()
    }

    pub fn scored_len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().flatten().sum()
    }
}

/// `max_k ‖V[k]‖₁`.
pub fn value_norm_max(values: &[Vec<f64>]) -> Result<f64> {
    ensure!(!values.is_empty(), Domain, "value norm of an empty head");
    Ok(values.iter().map(|v| l1_norm(v)).fold(0.0, f64::max))
}

/// LAVa score: `(V̄ / w) Σ_j A^j[i]` over the window rows.
pub fn lava_score(recent: &RecentAttention, vbar: f64, w: usize) -> Result<Vec<f64>> {
    let scale = vbar / w as f64;
    Ok(recent.window_sums(w)?.into_iter().map(|s| scale * s).collect())
}

/// Mean window attention.
pub fn snapkv_score(recent: &RecentAttention, w: usize) -> Result<Vec<f64>> {
    let inv = 1.0 / w as f64;
    Ok(recent.window_sums(w)?.into_iter().map(|s| inv * s).collect())
}

/// Accumulated attention `Σ_{j>i} A^j[i]` from full causal rows (row `j`
/// is the attention of stream `j`). Returns one entry per position.
pub fn h2o_score(full_attention: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = full_attention.len();
    ensure!(n > 0, State, "accumulated score needs the attention rows");
    let mut acc = vec![0.0; n];
    for (j, row) in full_attention.iter().enumerate() {
        ensure!(row.len() > j, State, "attention row {j} is truncated");
        for (a, x) in acc.iter_mut().zip(&row[..j]) {
            *a += x;
        }
    }
    Ok(acc)
}

/// Attention of the current stream.
pub fn tova_score(last_row: &[f64]) -> Vec<f64> {
    last_row.to_vec()
}

/// Window mean plus `gamma` times the (population) variance of the window samples.
pub fn cake_score(recent: &RecentAttention, w: usize, gamma: f64) -> Result<Vec<f64>> {
    ensure!(gamma >= 0.0 && gamma.is_finite(), Config, "cake gamma must be non-negative, got {gamma}");
    let means = snapkv_score(recent, w)?;
    let rows = recent.window(w)?;
    means
        .into_iter()
        .enumerate()
        .map(|(i, mean)| {
            let samples: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            Ok(mean + gamma * population_variance(&samples)?)
        })
        .collect()
}

/// Value-aware score with each token's own value norm: `(‖V[i]‖₁ / w) Σ_j A^j[i]`.
pub fn vatp_score(recent: &RecentAttention, w: usize, values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let sums = recent.window_sums(w)?;
    ensure!(values.len() >= sums.len(), Dimension, "fewer values than scored positions");
    Ok(sums.iter().zip(values).map(|(s, v)| l1_norm(v) / w as f64 * s).collect())
}

/// Max-pooling of a score row; kernel 1 leaves it unchanged.
pub fn pool_scores(row: &[f64], kernel: usize) -> Result<Vec<f64>> {
    maxpool1d(row, kernel)
}

/// Elementwise max over the query heads of a group.
pub fn gqa_reduce_max(group: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = group.first().ok_or_else(|| Error::Domain("empty head group".into()))?;
    ensure!(group.iter().all(|r| r.len() == first.len()), Dimension, "ragged score rows in group");
    let mut out = first.clone();
    for row in &group[1..] {
        for (o, &x) in out.iter_mut().zip(row) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

/// Per-entry eviction cost in the output-loss bound: `a · V̄`.
#[inline]
pub fn theorem1_term(a: f64, vbar: f64) -> f64 {
    a * vbar
}

/// Scores whose greedy eviction minimises the output-loss bound exactly:
/// for each kv-head, `V̄ · Σ_{h in group} A_h^N[i]` over scored positions.
pub fn bound_optimal_scores(last_attention: &[&[f64]], vbars: &[f64], window: usize) -> Result<ScoreTensor> {
    let kv_heads = vbars.len();
    ensure!(
        kv_heads > 0 && last_attention.len().is_multiple_of(kv_heads),
        Dimension,
        "query heads not divisible by kv-heads"
    );
    let group = last_attention.len() / kv_heads;
    let n = last_attention[0].len();
    ensure!(n > window, State, "no scored positions");
    let scored = n - window;
    let rows = (0..kv_heads)
        .map(|g| {
            (0..scored)
                .map(|i| {
                    (0..group).map(|k| theorem1_term(last_attention[g * group + k][i], vbars[g])).sum()
                })
                .collect()
        })
        .collect();
    Ok(ScoreTensor { rows })
}

/// Scoring policies by wire name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoringPolicy {
    Lava,
    SnapKv,
    H2o,
    Tova,
    Cake { gamma: f64 },
    Vatp,
}

impl ScoringPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ScoringPolicy::Lava => "lava",
            ScoringPolicy::SnapKv => "snapkv",
            ScoringPolicy::H2o => "h2o",
            ScoringPolicy::Tova => "tova",
            ScoringPolicy::Cake { .. } => "cake",
            ScoringPolicy::Vatp => "vatp",
        }
    }

    /// Whether the policy needs full N x N attention.
    pub fn needs_full_attention(&self) -> bool {
        matches!(self, ScoringPolicy::H2o)
    }
}

impl fmt::Display for ScoringPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoringPolicy {
    type Err = Error;

    /// Parses a wire name; `cake` gets `gamma = 1` (use the struct form to choose another).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lava" => ScoringPolicy::Lava,
            "snapkv" => ScoringPolicy::SnapKv,
            "h2o" => ScoringPolicy::H2o,
            "tova" => ScoringPolicy::Tova,
            "cake" => ScoringPolicy::Cake { gamma: 1.0 },
            "vatp" => ScoringPolicy::Vatp,
            other => return Err(Error::Config(format!("unknown scoring policy `{other}`"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random causal window rows: row j covers positions `0..=n-w+j`.
    fn random_recent(rng: &mut ChaCha8Rng, n: usize, w: usize) -> RecentAttention {
        let rows = (0..w)
            .map(|j| {
                let live = n - w + j + 1;
                let raw: Vec<f64> = (0..live).map(|_| rng.random_range(0.0..1.0)).collect();
                let z: f64 = raw.iter().sum();
                let mut row: Vec<f64> = raw.into_iter().map(|x| x / z).collect();
                row.resize(n, 0.0);
                row
            })
            .collect();
        RecentAttention::new(rows)
    }

    fn random_values(rng: &mut ChaCha8Rng, n: usize, dh: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dh).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn value_norm_examples() {
        assert_eq!(value_norm_max(&[vec![1.0, -1.0], vec![0.5, 0.0]]).unwrap(), 2.0);
        assert_eq!(value_norm_max(&vec![vec![0.0; 3]; 4]).unwrap(), 0.0);
        assert!(value_norm_max(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_values(&mut rng, 20, 5, 3.0);
        let mut best = 0.0;
        for row in &v {
            let s: f64 = row.iter().map(|x| x.abs()).sum();
            if s > best {
                best = s;
            }
        }
        assert_eq!(value_norm_max(&v).unwrap(), best);
    }

    #[test]
    fn window_score_examples() {
        // w = 2; position 0 receives 0.1 and 0.3 from the two window rows
        let recent = RecentAttention::new(vec![vec![0.1, 0.6, 0.3, 0.0], vec![0.3, 0.2, 0.1, 0.4]]);
        assert!((lava_score(&recent, 2.0, 2).unwrap()[0] - 0.4).abs() < 1e-15);
        assert!((snapkv_score(&recent, 2).unwrap()[0] - 0.2).abs() < 1e-15);
        assert_eq!(lava_score(&recent, 0.0, 2).unwrap(), vec![0.0, 0.0]);
        assert!((cake_score(&recent, 2, 1.0).unwrap()[0] - 0.21).abs() < 1e-15);
        let values = vec![vec![1.0, -1.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, 1.0]];
        let vatp = vatp_score(&recent, 2, &values).unwrap();
        assert!((vatp[0] - 0.4).abs() < 1e-15);
        assert_eq!(vatp[1], 0.0);
        assert!(matches!(lava_score(&recent, 1.0, 3), Err(Error::State(_))));
        assert!(matches!(cake_score(&recent, 2, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_rows_give_equal_snapkv_scores() {
        let recent = RecentAttention::new(vec![vec![0.25; 4]; 2]);
        let s = snapkv_score(&recent, 2).unwrap();
        assert!(s.iter().all(|&x| x == s[0]));
    }

    #[test]
    fn h2o_examples() {
        let full = vec![vec![1.0, 0.0, 0.0], vec![0.4, 0.6, 0.0], vec![0.2, 0.3, 0.5]];
        let s = h2o_score(&full).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.3).abs() < 1e-15 && s[2] == 0.0);
        assert_eq!(h2o_score(&[vec![1.0]]).unwrap(), vec![0.0]);
        assert!(h2o_score(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rec = random_recent(&mut rng, 9, 8);
        let mut full = vec![{
            let mut r = vec![0.0; 9];
            r[0] = 1.0;
            r
        }];
        full.extend(rec.rows().iter().cloned());
        let s = h2o_score(&full).unwrap();
        for i in 0..9 {
            let col: f64 = (i + 1..9).map(|j| full[j][i]).sum();
            assert!((s[i] - col).abs() < 1e-15);
        }
    }

    #[test]
    fn tova_is_identity() {
        assert_eq!(tova_score(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        assert_eq!(tova_score(&[0.0, 1.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn cake_reduces_to_snapkv_at_zero_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rec = random_recent(&mut rng, 20, 5);
        assert_eq!(cake_score(&rec, 5, 0.0).unwrap(), snapkv_score(&rec, 5).unwrap());
        let got = cake_score(&rec, 5, 5.0).unwrap();
        for (i, g) in got.iter().enumerate() {
            let xs: Vec<f64> = rec.rows().iter().map(|r| r[i]).collect();
            let m = xs.iter().sum::<f64>() / 5.0;
            let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
            assert!((g - (m + 5.0 * var)).abs() < 1e-14);
        }
    }

    #[test]
    fn pool_examples() {
        assert_eq!(pool_scores(&[0.3; 10], 7).unwrap(), vec![0.3; 10]);
        let mut spike = vec![0.0; 11];
        spike[5] = 1.0;
        let pooled = pool_scores(&spike, 7).unwrap();
        assert_eq!(pooled.iter().filter(|&&x| x == 1.0).count(), 7);
        assert_eq!(pool_scores(&spike, 1).unwrap(), spike);
    }

    #[test]
    fn gqa_examples() {
        assert_eq!(gqa_reduce_max(&[vec![0.2, 0.7], vec![0.5, 0.1]]).unwrap(), vec![0.5, 0.7]);
        assert_eq!(gqa_reduce_max(&[vec![0.2, 0.7]]).unwrap(), vec![0.2, 0.7]);
        assert!(matches!(gqa_reduce_max(&[vec![0.2], vec![0.1, 0.3]]), Err(Error::Dimension(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let group: Vec<Vec<f64>> = (0..4).map(|_| (0..30).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let folded = group.iter().skip(1).fold(group[0].clone(), |acc, r| {
            acc.iter().zip(r).map(|(a, b)| if b > a { *b } else { *a }).collect()
        });
        assert_eq!(gqa_reduce_max(&group).unwrap(), folded);
    }

    #[test]
    fn theorem1_term_examples() {
        assert_eq!(theorem1_term(0.5, 2.0), 1.0);
        assert_eq!(theorem1_term(0.0, 9.0), 0.0);
        assert_eq!(theorem1_term(0.37, 1.5), 0.37 * 1.5);
    }

    #[test]
    fn policy_names_round_trip() {
        for name in ["lava", "snapkv", "h2o", "tova", "cake", "vatp"] {
            assert_eq!(name.parse::<ScoringPolicy>().unwrap().name(), name);
        }
        assert!("pyramid".parse::<ScoringPolicy>().is_err());
    }

    proptest! {
        #[test]
        fn lava_is_vbar_times_snapkv_and_scales(seed in 0u64..500, n in 6usize..40, w in 1usize..5, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rec = random_recent(&mut rng, n, w);
            let values = random_values(&mut rng, n, 4, 2.0);
            let vbar = value_norm_max(&values).unwrap();
            let lava = lava_score(&rec, vbar, w).unwrap();
            let snap = snapkv_score(&rec, w).unwrap();
            for (l, s) in lava.iter().zip(&snap) {
                prop_assert!((l - vbar * s).abs() <= 1e-15 * l.abs().max(1e-300) * 4.0);
                prop_assert!(*l >= 0.0);
            }
            let scaled: Vec<Vec<f64>> = values.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
            let lava_c = lava_score(&rec, value_norm_max(&scaled).unwrap(), w).unwrap();
            for (a, b) in lava_c.iter().zip(&lava) {
                prop_assert!((a - c * b).abs() <= 1e-12 * (c * b).abs().max(1e-12));
            }
            let k = lava.len() / 2;
            let mut top = crate::numerics::top_k_indices(&lava, k).unwrap();
            let mut top_c = crate::numerics::top_k_indices(&lava_c, k).unwrap();
            top.sort_unstable();
            top_c.sort_unstable();
            prop_assert_eq!(top, top_c);
        }

        #[test]
        fn pooling_and_reduction_never_decrease(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..5)) {
            let red = gqa_reduce_max(&rows).unwrap();
            for r in &rows {
                for (a, b) in red.iter().zip(r) {
                    prop_assert!(a >= b);
                }
            }
            let pooled = pool_scores(&red, 7).unwrap();
            for (a, b) in pooled.iter().zip(&red) {
                prop_assert!(a >= b);
            }
        }
    }
}
