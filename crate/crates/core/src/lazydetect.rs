//! Lazy-ratio statistics and the bounded max-queue that picks which layers
//! switch to streaming attention during prefill.
//!
//! The lazy ratio of a layer is the head-averaged attention mass that the
//! last `w_last` query rows place on their streaming-kept keys (sink tokens
//! plus a recent window ending at the query itself), averaged over those
//! rows. It is computed two ways:
//!
//! * [`lazy_ratio_bruteforce`] sums explicit softmax weights;
//! * [`lazy_ratio_lse`] only rescores the kept keys and subtracts the full
//!   row's log-sum-exp, which a fused attention kernel returns for free.

use std::collections::{BinaryHeap, BTreeSet};
use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::kvcache::streaming_allowed;
use crate::numerics::{dot, logsumexp, masked_row_softmax, matmul, MaskSpec, Matrix};

pub const DEFAULT_W_LAST: usize = 32;
pub const DEFAULT_W_SINK: usize = 4;
pub const DEFAULT_W_RECENT: usize = 1020;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectParams {
    pub w_last: usize,
    pub w_sink: usize,
    pub w_recent: usize,
    /// Number of layers that keep full attention (`P`).
    pub keep_full: usize,
}

impl DetectParams {
    /// Default windows with half of the layers (rounded up) kept full.
    pub fn defaults_for(layers: usize) -> Self {
        Self {
            w_last: DEFAULT_W_LAST,
            w_sink: DEFAULT_W_SINK,
            w_recent: DEFAULT_W_RECENT,
            keep_full: layers.div_ceil(2),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.w_last == 0 {
            return input("w_last must be >= 1");
        }
        if self.w_recent == 0 {
            return input("w_recent must be >= 1");
        }
        if self.keep_full > layers {
            return input(format!(
                "cannot keep {} full layers in a {layers}-layer model",
                self.keep_full
            ));
        }
        Ok(())
    }

    /// Query rows used for a prompt of `n` tokens.
    pub fn query_rows(&self, n: usize) -> std::ops::Range<usize> {
        n.saturating_sub(self.w_last)..n
    }
}

/// Causal softmax weights `softmax(scale * q k^T + M)` of one head.
pub fn causal_attention_weights(q: &Matrix, k: &Matrix, scale: f64) -> Result<Matrix> {
    let scores = matmul(q, &k.transpose())?.scaled(scale);
    masked_row_softmax(&scores, &MaskSpec::Causal)
}

/// Lazy ratio from explicit per-head causal attention matrices (`N x N`).
pub fn lazy_ratio_bruteforce(attn: &[Matrix], params: &DetectParams) -> Result<f64> {
    let Some(first) = attn.first() else {
        return contract("no attention heads given");
    };
    let n = first.rows();
    if n < 1 {
        return input("lazy ratio needs at least one token");
    }
    if attn.iter().any(|a| a.rows() != n || a.cols() != n) {
        return contract("attention matrices must all be N x N");
    }
    let heads = attn.len() as f64;
    let rows = params.query_rows(n);
    let count = rows.len() as f64;
    let mut total = 0.0;
    for q in rows {
        let kept = streaming_allowed(q, params.w_sink, params.w_recent);
        // Head-averaged weights over the causal row.
        let avg: Vec<f64> = (0..=q)
            .map(|j| attn.iter().map(|a| a.get(q, j)).sum::<f64>() / heads)
            .collect();
        let kept_mass: f64 = kept.iter().map(|&j| avg[j]).sum();
        let all_mass: f64 = avg.iter().sum();
        total += kept_mass / all_mass;
    }
    Ok(total / count)
}

/// Ratio of one layer computed from log-sum-exp values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub ratio: f64,
    /// `log_ratios[h][r]` for head `h` and the `r`-th of the last query rows.
    pub log_ratios: Vec<Vec<f64>>,
}

/// Lazy ratio from the last query rows, all keys, and each row's full
/// causal log-sum-exp.
///
/// `q_last[h]` holds the last `w` query rows of head `h` (`w = min(w_last, N)`),
/// `keys[h]` all `N` keys, and `lse[h][r]` the log-sum-exp of query row
/// `N - w + r` over keys `0..=N-w+r`, with the same `scale` applied.
pub fn lazy_ratio_lse(
    q_last: &[Matrix],
    keys: &[Matrix],
    lse: &[Vec<f64>],
    params: &DetectParams,
    scale: f64,
) -> Result<LayerRatio> {
    if q_last.is_empty() || q_last.len() != keys.len() || keys.len() != lse.len() {
        return contract(format!(
            "head counts differ: {} query, {} key, {} lse blocks",
            q_last.len(),
            keys.len(),
            lse.len()
        ));
    }
    let n = keys[0].rows();
    if n == 0 {
        return input("lazy ratio needs at least one token");
    }
    let w = q_last[0].rows();
    if w != params.query_rows(n).len() {
        return contract(format!(
            "expected {} query rows for N={n}, got {w}",
            params.query_rows(n).len()
        ));
    }
    for h in 0..keys.len() {
        if keys[h].rows() != n || q_last[h].rows() != w || lse[h].len() != w {
            return contract("per-head blocks have inconsistent row counts");
        }
    }
    let first = n - w;
    let kept_sets: Vec<Vec<usize>> = (first..n)
        .map(|q| streaming_allowed(q, params.w_sink, params.w_recent))
        .collect();
    let log_ratios: Vec<Vec<f64>> = (0..keys.len())
        .map(|h| {
            kept_sets
                .iter()
                .enumerate()
                .map(|(r, kept)| {
                    let query = q_last[h].row(r);
                    let scores: Vec<f64> = kept
                        .iter()
                        .map(|&j| dot(query, keys[h].row(j)) * scale)
                        .collect();
                    logsumexp(&scores) - lse[h][r]
                })
                .collect()
        })
        .collect();
    Ok(LayerRatio {
        ratio: average_ratio(&log_ratios),
        log_ratios,
    })
}

/// Mean over rows of the head-averaged `exp(log ratio)`.
pub(crate) fn average_ratio(log_ratios: &[Vec<f64>]) -> f64 {
    let heads = log_ratios.len() as f64;
    let rows = log_ratios[0].len();
    let mut total = 0.0;
    for r in 0..rows {
        total += log_ratios.iter().map(|h| h[r].exp()).sum::<f64>() / heads;
    }
    total / rows as f64
}

#[derive(Debug, Clone, Copy)]
struct QueueEntry {
    ratio: f64,
    layer: usize,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueEntry {
    // Max-heap on ratio; equal ratios pop the deeper layer first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.ratio
            .total_cmp(&other.ratio)
            .then(self.layer.cmp(&other.layer))
    }
}

/// Bounded max-priority queue of `(ratio, layer)`; overflow pops the
/// laziest layer.
#[derive(Debug, Clone)]
pub struct IdentifierState {
    capacity: usize,
    entries: BinaryHeap<QueueEntry>,
    pushed: BTreeSet<usize>,
    lazy: Vec<usize>,
    peak_len: usize,
}

/// Final split of layers into full-attention and streaming sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSplit {
    pub non_lazy: Vec<usize>,
    pub lazy: Vec<usize>,
}

impl IdentifierState {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: BinaryHeap::with_capacity(capacity + 1),
            pushed: BTreeSet::new(),
            lazy: Vec::new(),
            peak_len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries currently queued (layers still on full attention).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest queue length observed between pushes.
    pub fn peak_len(&self) -> usize {
        self.peak_len
    }

    /// Layers popped so far, in pop order.
    pub fn popped(&self) -> &[usize] {
        &self.lazy
    }

    /// Pushes `(ratio, layer)`; returns the layer popped as lazy, if any.
    pub fn push(&mut self, layer: usize, ratio: f64) -> Result<Option<usize>> {
        if !self.pushed.insert(layer) {
            return contract(format!("layer {layer} pushed twice"));
        }
        if ratio.is_nan() {
            return contract(format!("layer {layer} has a NaN lazy ratio"));
        }
        self.entries.push(QueueEntry { ratio, layer });
        let popped = if self.entries.len() > self.capacity {
            let top = self.entries.pop().expect("non-empty");
            self.lazy.push(top.layer);
            Some(top.layer)
        } else {
            None
        };
        self.peak_len = self.peak_len.max(self.entries.len());
        Ok(popped)
    }

    /// Splits the layers once every one of `0..layers` has been pushed.
    pub fn finalize(&self, layers: usize) -> Result<LayerSplit> {
        if self.pushed.len() != layers || self.pushed.iter().any(|&l| l >= layers) {
            return contract(format!(
                "finalize needs layers 0..{layers} pushed, have {:?}",
                self.pushed
            ));
        }
        let mut non_lazy: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        non_lazy.sort_unstable();
        let mut lazy = self.lazy.clone();
        lazy.sort_unstable();
        Ok(LayerSplit { non_lazy, lazy })
    }
}

/// Convenience: run every ratio through a fresh queue of capacity `keep_full`.
pub fn select_layers(ratios: &[f64], keep_full: usize) -> Result<LayerSplit> {
    let mut state = IdentifierState::new(keep_full);
    for (i, &r) in ratios.iter().enumerate() {
        state.push(i, r)?;
    }
    state.finalize(ratios.len())
}

/// Per-layer ratios and the resulting split from one prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LazyRatioReport {
    pub params: DetectParams,
    pub ratios: Vec<f64>,
    /// `head_log_ratios[layer][head][row]`.
    pub head_log_ratios: Vec<Vec<Vec<f64>>>,
    pub lazy_layers: Vec<usize>,
    pub non_lazy_layers: Vec<usize>,
    /// Order in which layers left the queue during prefill.
    pub pop_order: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(w_last: usize, w_sink: usize, w_recent: usize) -> DetectParams {
        DetectParams {
            w_last,
            w_sink,
            w_recent,
            keep_full: 0,
        }
    }

    fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn short_input_ratio_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_m(&mut rng, 12, 4);
        let k = rand_m(&mut rng, 12, 4);
        let a = causal_attention_weights(&q, &k, 1.0).unwrap();
        assert_eq!(lazy_ratio_bruteforce(&[a.clone(), a], &params(32, 4, 8)).unwrap(), 1.0);
    }

    #[test]
    fn uniform_row_splits_by_count() {
        // Last row of an 8x8 causal uniform matrix; kept {0} ∪ {5,6,7}.
        let zeros = Matrix::zeros(8, 1);
        let a = causal_attention_weights(&zeros, &zeros, 1.0).unwrap();
        let r = lazy_ratio_bruteforce(&[a], &params(1, 1, 3)).unwrap();
        assert!((r - 0.5).abs() < 1e-15);

        let lse = vec![vec![(8f64).ln()]];
        let got = lazy_ratio_lse(&[Matrix::zeros(1, 1)], &[zeros], &lse, &params(1, 1, 3), 1.0).unwrap();
        assert!((got.ratio - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lse_route_full_keep_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_m(&mut rng, 6, 3);
        let k = rand_m(&mut rng, 6, 3);
        let p = params(6, 2, 10);
        let scores = matmul(&q, &k.transpose()).unwrap();
        let lse = crate::numerics::masked_row_logsumexp(&scores, &MaskSpec::Causal).unwrap();
        let got = lazy_ratio_lse(&[q], &[k], &[lse], &p, 1.0).unwrap();
        assert!(got.log_ratios[0].iter().all(|&l| l.abs() < 1e-12));
        assert!((got.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 32;
        let p = params(8, 2, 5);
        let heads: Vec<Matrix> = (0..2)
            .map(|_| {
                let q = rand_m(&mut rng, n, 4);
                let k = rand_m(&mut rng, n, 4);
                causal_attention_weights(&q, &k, 1.0).unwrap()
            })
            .collect();
        let mut oracle = 0.0;
        for q in n - 8..n {
            let mut row = 0.0;
            for j in 0..=q {
                let kept = j < 2 || j + 5 > q;
                if kept {
                    row += (heads[0].get(q, j) + heads[1].get(q, j)) / 2.0;
                }
            }
            oracle += row;
        }
        oracle /= 8.0;
        let got = lazy_ratio_bruteforce(&heads, &p).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn lse_route_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, h) = (40, 3);
        let p = params(10, 3, 7);
        let qs: Vec<Matrix> = (0..h).map(|_| rand_m(&mut rng, n, 4)).collect();
        let ks: Vec<Matrix> = (0..h).map(|_| rand_m(&mut rng, n, 4)).collect();
        let scale = 0.5;
        let attn: Vec<Matrix> = qs
            .iter()
            .zip(&ks)
            .map(|(q, k)| causal_attention_weights(q, k, scale).unwrap())
            .collect();
        let rows: Vec<usize> = p.query_rows(n).collect();
        let q_last: Vec<Matrix> = qs.iter().map(|q| q.select_rows(&rows)).collect();
        let lse: Vec<Vec<f64>> = qs
            .iter()
            .zip(&ks)
            .map(|(q, k)| {
                let s = matmul(q, &k.transpose()).unwrap().scaled(scale);
                let all = crate::numerics::masked_row_logsumexp(&s, &MaskSpec::Causal).unwrap();
                rows.iter().map(|&r| all[r]).collect()
            })
            .collect();
        let a = lazy_ratio_lse(&q_last, &ks, &lse, &p, scale).unwrap();
        let b = lazy_ratio_bruteforce(&attn, &p).unwrap();
        assert!((a.ratio - b).abs() < 1e-10);
        for head in &a.log_ratios {
            for &l in head {
                assert!(l <= 1e-12 && l.exp() > 0.0);
            }
        }
    }

    #[test]
    fn lse_rejects_mismatched_heads() {
        let m = Matrix::zeros(2, 2);
        let r = lazy_ratio_lse(&[m.clone()], &[m.clone(), m], &[vec![0.0; 2]], &params(2, 1, 1), 1.0);
        assert!(matches!(r, Err(crate::LazyKvError::Contract(_))));
    }

    #[test]
    fn queue_hand_simulation() {
        let mut s = IdentifierState::new(2);
        assert_eq!(s.push(0, 0.9).unwrap(), None);
        assert_eq!(s.push(1, 0.2).unwrap(), None);
        assert_eq!(s.push(2, 0.8).unwrap(), Some(0));
        assert_eq!(s.push(3, 0.1).unwrap(), Some(2));
        let split = s.finalize(4).unwrap();
        assert_eq!(split.non_lazy, vec![1, 3]);
        assert_eq!(split.lazy, vec![0, 2]);
        assert_eq!(s.peak_len(), 2);
    }

    #[test]
    fn queue_edge_capacities() {
        let ratios = [0.4, 0.7, 0.1, 0.9, 0.3];
        let all = select_layers(&ratios, 5).unwrap();
        assert!(all.lazy.is_empty());
        assert_eq!(all.non_lazy, vec![0, 1, 2, 3, 4]);

        let mut s = IdentifierState::new(0);
        for (i, &r) in ratios.iter().enumerate() {
            assert_eq!(s.push(i, r).unwrap(), Some(i));
        }
        assert_eq!(s.finalize(5).unwrap().lazy, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn equal_ratios_pop_deeper_layers() {
        let split = select_layers(&[0.5; 4], 2).unwrap();
        assert_eq!(split.non_lazy, vec![0, 1]);
        assert_eq!(split.lazy, vec![2, 3]);
    }

    #[test]
    fn duplicate_push_and_early_finalize_fail() {
        let mut s = IdentifierState::new(1);
        s.push(0, 0.3).unwrap();
        assert!(s.push(0, 0.2).is_err());
        assert!(s.finalize(2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn queue_keeps_smallest_ratios(
                ratios in proptest::collection::vec(0.0f64..1.0, 1..12),
                p_frac in 0.0f64..=1.0,
            ) {
                let l = ratios.len();
                let p = ((l as f64) * p_frac).round() as usize;
                let mut s = IdentifierState::new(p);
                for (i, &r) in ratios.iter().enumerate() {
                    s.push(i, r).unwrap();
                    prop_assert!(s.len() <= p);
                }
                let split = s.finalize(l).unwrap();
                prop_assert_eq!(split.lazy.len(), l - p);
                let mut order: Vec<usize> = (0..l).collect();
                order.sort_by(|&a, &b| ratios[a].total_cmp(&ratios[b]).then(a.cmp(&b)));
                let mut expect: Vec<usize> = order[..p].to_vec();
                expect.sort_unstable();
                prop_assert_eq!(split.non_lazy, expect);
            }
        }
    }
}
