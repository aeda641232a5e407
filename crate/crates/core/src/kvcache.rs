//! Per-layer key/value storage under a full or streaming (sink + recent
//! window) policy.
//!
//! A streaming cache that has seen `n` tokens holds exactly the positions
//! `{0..sink} ∪ {n-recent..n}` (clipped to `0..n`, deduplicated), so it never
//! holds more than `sink + recent` rows. Eviction happens on every append and
//! is irreversible.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::numerics::{allowed_softmax, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CachePolicy {
    Full,
    Streaming { sink: usize, recent: usize },
}

impl CachePolicy {
    pub fn streaming(sink: usize, recent: usize) -> Result<Self> {
        if recent == 0 {
            return input("streaming window needs w_recent >= 1");
        }
        Ok(CachePolicy::Streaming { sink, recent })
    }

    /// Maximum number of cached rows, `None` for unbounded.
    pub fn capacity(&self) -> Option<usize> {
        match *self {
            CachePolicy::Full => None,
            CachePolicy::Streaming { sink, recent } => Some(sink + recent),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, CachePolicy::Full)
    }
}

/// Key positions a streaming layer lets the query at `query_pos` see:
/// `({0..sink} ∪ {query_pos+1-recent ..= query_pos}) ∩ {0..=query_pos}`.
pub fn streaming_allowed(query_pos: usize, sink: usize, recent: usize) -> Vec<usize> {
    let window_start = (query_pos + 1).saturating_sub(recent);
    let sink_end = sink.min(window_start);
    (0..sink_end).chain(window_start..=query_pos).collect()
}

/// Positions a streaming cache holds after `total_seen` tokens.
pub fn streaming_kept(total_seen: usize, sink: usize, recent: usize) -> Vec<usize> {
    match total_seen {
        0 => Vec::new(),
        n => streaming_allowed(n - 1, sink, recent),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CachedToken {
    position: usize,
    /// `heads * d_head`, head-major.
    keys: Vec<f64>,
    /// `heads * d_value`, head-major.
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    policy: CachePolicy,
    heads: usize,
    d_head: usize,
    d_value: usize,
    tokens: VecDeque<CachedToken>,
    total_seen: usize,
}

impl LayerCache {
    pub fn new(policy: CachePolicy, heads: usize, d_head: usize, d_value: usize) -> Self {
        Self {
            policy,
            heads,
            d_head,
            d_value,
            tokens: VecDeque::new(),
            total_seen: 0,
        }
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn total_seen(&self) -> usize {
        self.total_seen
    }

    /// Number of cached rows (per head).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kept_positions(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.position).collect()
    }

    /// Appends `t` tokens given as per-head `t x d_head` keys and
    /// `t x d_value` values, evicting immediately under a streaming policy.
    pub fn append(&mut self, keys: &[Matrix], values: &[Matrix]) -> Result<()> {
        if keys.len() != self.heads || values.len() != self.heads {
            return contract(format!(
                "expected {} heads, got {} key and {} value blocks",
                self.heads,
                keys.len(),
                values.len()
            ));
        }
        let t = keys[0].rows();
        for (k, v) in keys.iter().zip(values) {
            if k.cols() != self.d_head || v.cols() != self.d_value || k.rows() != t || v.rows() != t {
                return contract(format!(
                    "cache rows must be {t}x{} keys and {t}x{} values, got {}x{} and {}x{}",
                    self.d_head,
                    self.d_value,
                    k.rows(),
                    k.cols(),
                    v.rows(),
                    v.cols()
                ));
            }
        }
        for r in 0..t {
            let mut tok = CachedToken {
                position: self.total_seen,
                keys: Vec::with_capacity(self.heads * self.d_head),
                values: Vec::with_capacity(self.heads * self.d_value),
            };
            for (k, v) in keys.iter().zip(values) {
                tok.keys.extend_from_slice(k.row(r));
                tok.values.extend_from_slice(v.row(r));
            }
            self.tokens.push_back(tok);
            self.total_seen += 1;
            self.evict();
        }
        Ok(())
    }

    /// Single-token append from per-head rows.
    pub fn push_token(&mut self, keys: Vec<f64>, values: Vec<f64>) -> Result<()> {
        if keys.len() != self.heads * self.d_head || values.len() != self.heads * self.d_value {
            return contract("token key/value widths do not match the cache layout");
        }
        self.tokens.push_back(CachedToken {
            position: self.total_seen,
            keys,
            values,
        });
        self.total_seen += 1;
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        let CachePolicy::Streaming { sink, recent } = self.policy else {
            return;
        };
        let n_sinks = sink.min(self.total_seen);
        let window_start = self.total_seen.saturating_sub(recent);
        while let Some(tok) = self.tokens.get(n_sinks) {
            if tok.position >= window_start {
                break;
            }
            self.tokens.remove(n_sinks);
        }
    }

    /// Switches a full cache to streaming, dropping the middle rows in one
    /// step. A cache that is already streaming is left untouched.
    pub fn transfer_to_streaming(&mut self, sink: usize, recent: usize) -> Result<()> {
        let policy = CachePolicy::streaming(sink, recent)?;
        if !self.policy.is_full() {
            return Ok(());
        }
        self.policy = policy;
        let window_start = self.total_seen.saturating_sub(recent);
        self.tokens
            .retain(|t| t.position < sink || t.position >= window_start);
        Ok(())
    }

    /// Attention of query rows (per head, `t x d_head`) at absolute positions
    /// `positions` over the cached rows at or before each position, summed
    /// over heads. Output is `t x d_value`.
    pub fn attend(&self, queries: &[Matrix], positions: &[usize], scale: f64) -> Result<Matrix> {
        if queries.len() != self.heads {
            return contract(format!("expected {} query heads, got {}", self.heads, queries.len()));
        }
        let t = positions.len();
        if queries.iter().any(|q| q.rows() != t || q.cols() != self.d_head) {
            return contract("query blocks must be positions.len() x d_head");
        }
        let mut out = Matrix::zeros(t, self.d_value);
        for (r, &pos) in positions.iter().enumerate() {
            let visible = self.tokens.partition_point(|tok| tok.position <= pos);
            if visible == 0 {
                return contract(format!("no cached keys visible from position {pos}"));
            }
            let row = self.attend_one(queries.iter().map(|q| q.row(r)), visible, scale);
            out.row_mut(r).copy_from_slice(&row);
        }
        Ok(out)
    }

    /// Attention of a single query (given per head) over the first
    /// `visible` cached rows, summed over heads.
    pub(crate) fn attend_one<'q>(
        &self,
        queries: impl Iterator<Item = &'q [f64]>,
        visible: usize,
        scale: f64,
    ) -> Vec<f64> {
        let (dk, dv) = (self.d_head, self.d_value);
        let mut total = vec![0.0; dv];
        let mut scores = vec![0.0; visible];
        let mut weights = vec![0.0; visible];
        let mut head_out = vec![0.0; dv];
        for (h, q) in queries.enumerate() {
            for (s, tok) in scores.iter_mut().zip(&self.tokens) {
                *s = dot(q, &tok.keys[h * dk..(h + 1) * dk]) * scale;
            }
            allowed_softmax(&scores, &mut weights);
            head_out.iter_mut().for_each(|o| *o = 0.0);
            for (w, tok) in weights.iter().zip(&self.tokens) {
                for (o, &x) in head_out.iter_mut().zip(&tok.values[h * dv..(h + 1) * dv]) {
                    *o += w * x;
                }
            }
            for (t, o) in total.iter_mut().zip(&head_out) {
                *t += o;
            }
        }
        total
    }

    /// Scaled scores of one head's query against every cached key, in
    /// position order.
    pub(crate) fn head_scores(&self, head: usize, query: &[f64], scale: f64) -> Vec<f64> {
        let dk = self.d_head;
        self.tokens
            .iter()
            .map(|tok| dot(query, &tok.keys[head * dk..(head + 1) * dk]) * scale)
            .collect()
    }
}

/// Cached-row accounting across layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryMeter {
    per_layer: Vec<usize>,
    per_layer_peak: Vec<usize>,
    peak_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub per_layer_rows: Vec<usize>,
    pub per_layer_peak_rows: Vec<usize>,
    pub total_rows: usize,
    pub peak_total_rows: usize,
}

impl MemoryMeter {
    pub fn new(layers: usize) -> Self {
        Self {
            per_layer: vec![0; layers],
            per_layer_peak: vec![0; layers],
            peak_total: 0,
        }
    }

    pub fn record(&mut self, layer: usize, rows: usize) {
        self.per_layer[layer] = rows;
        self.per_layer_peak[layer] = self.per_layer_peak[layer].max(rows);
        self.peak_total = self.peak_total.max(self.total());
    }

    pub fn total(&self) -> usize {
        self.per_layer.iter().sum()
    }

    pub fn stats(&self) -> MemoryStats {
        MemoryStats {
            per_layer_rows: self.per_layer.clone(),
            per_layer_peak_rows: self.per_layer_peak.clone(),
            total_rows: self.total(),
            peak_total_rows: self.peak_total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention_pass, ln_rows, random_init, ModelConfig};
    use crate::numerics::{matmul, MaskSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_token(rng: &mut ChaCha8Rng, heads: usize, dk: usize, dv: usize) -> (Vec<Matrix>, Vec<Matrix>) {
        let mut mk = |c: usize| {
            (0..heads)
                .map(|_| Matrix::from_vec(1, c, (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect::<Vec<_>>()
        };
        let k = mk(dk);
        let v = mk(dv);
        (k, v)
    }

    fn set_oracle(n: usize, sink: usize, recent: usize) -> Vec<usize> {
        let mut set = std::collections::BTreeSet::new();
        for p in 0..sink.min(n) {
            set.insert(p);
        }
        for p in n.saturating_sub(recent)..n {
            set.insert(p);
        }
        set.into_iter().collect()
    }

    #[test]
    fn streaming_under_capacity_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cache = LayerCache::new(CachePolicy::streaming(4, 8).unwrap(), 2, 3, 5);
        for _ in 0..10 {
            let (k, v) = one_token(&mut rng, 2, 3, 5);
            cache.append(&k, &v).unwrap();
        }
        assert_eq!(cache.kept_positions(), (0..10).collect::<Vec<_>>());
        for _ in 10..20 {
            let (k, v) = one_token(&mut rng, 2, 3, 5);
            cache.append(&k, &v).unwrap();
        }
        let expect: Vec<usize> = (0..4).chain(12..20).collect();
        assert_eq!(cache.kept_positions(), expect);
        assert_eq!(expect, set_oracle(20, 4, 8));
        assert_eq!(cache.len(), 12);
    }

    #[test]
    fn full_cache_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cache = LayerCache::new(CachePolicy::Full, 1, 2, 2);
        for _ in 0..20 {
            let (k, v) = one_token(&mut rng, 1, 2, 2);
            cache.append(&k, &v).unwrap();
        }
        assert_eq!(cache.len(), 20);
        assert_eq!(cache.total_seen(), 20);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut cache = LayerCache::new(CachePolicy::Full, 1, 2, 2);
        let k = vec![Matrix::zeros(1, 3)];
        let v = vec![Matrix::zeros(1, 2)];
        assert!(matches!(cache.append(&k, &v), Err(crate::LazyKvError::Contract(_))));
        assert!(cache.append(&[], &[]).is_err());
    }

    #[test]
    fn transfer_drops_middle_in_one_step() {
        let mut cache = LayerCache::new(CachePolicy::Full, 1, 1, 1);
        let n = 2048;
        cache
            .append(&[Matrix::zeros(n, 1)], &[Matrix::zeros(n, 1)])
            .unwrap();
        cache.transfer_to_streaming(4, 1020).unwrap();
        let expect: Vec<usize> = (0..4).chain(1028..2048).collect();
        assert_eq!(cache.kept_positions(), expect);
        assert_eq!(cache.len(), 1024);
        let once = cache.clone();
        cache.transfer_to_streaming(4, 1020).unwrap();
        assert_eq!(cache, once);

        let mut short = LayerCache::new(CachePolicy::Full, 1, 1, 1);
        short
            .append(&[Matrix::zeros(900, 1)], &[Matrix::zeros(900, 1)])
            .unwrap();
        short.transfer_to_streaming(4, 1020).unwrap();
        assert_eq!(short.len(), 900);
    }

    #[test]
    fn memory_meter_counts() {
        let meter = MemoryMeter::new(3);
        assert_eq!(meter.stats().total_rows, 0);
        assert_eq!(meter.stats().peak_total_rows, 0);

        let mut meter = MemoryMeter::new(1);
        meter.record(0, 100);
        assert_eq!(meter.stats().total_rows, 100);

        // Full layer at 100 rows, streaming layers capped at 2 + 8.
        let mut meter = MemoryMeter::new(3);
        let mut caches = vec![
            LayerCache::new(CachePolicy::Full, 1, 1, 1),
            LayerCache::new(CachePolicy::streaming(2, 8).unwrap(), 1, 1, 1),
            LayerCache::new(CachePolicy::streaming(0, 5).unwrap(), 1, 1, 1),
        ];
        for _ in 0..100 {
            for (i, c) in caches.iter_mut().enumerate() {
                c.append(&[Matrix::zeros(1, 1)], &[Matrix::zeros(1, 1)]).unwrap();
                meter.record(i, c.len());
            }
        }
        let stats = meter.stats();
        assert_eq!(stats.per_layer_rows, vec![100, 10, 5]);
        assert_eq!(stats.total_rows, 115);
        assert_eq!(stats.peak_total_rows, 115);
    }

    #[test]
    fn full_cache_attention_equals_mha() {
        let cfg = ModelConfig::practical(1, 2, 6, 3, 10);
        let w = random_init(&cfg, 4, 0.8).unwrap();
        let tokens = [1u32, 3, 5, 7, 9, 2, 4];
        let x = ln_rows(&crate::model::embed(&tokens, &w).unwrap(), cfg.norm);
        let pass = attention_pass(&x, &w.layers[0], &MaskSpec::Causal, &cfg).unwrap();
        let mut cache = LayerCache::new(CachePolicy::Full, 2, 3, 6);
        let ks: Vec<Matrix> = pass.heads.iter().map(|h| h.k.clone()).collect();
        let vs: Vec<Matrix> = pass.heads.iter().map(|h| h.v.clone()).collect();
        cache.append(&ks, &vs).unwrap();
        let qs: Vec<Matrix> = pass.heads.iter().map(|h| h.q.clone()).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let out = cache.attend(&qs, &positions, cfg.logit_scale()).unwrap();
        assert_eq!(out, pass.mha_out);
    }

    #[test]
    fn streaming_attention_matches_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, sink, recent, heads, dk, dv) = (64, 2, 8, 2, 3, 4);
        let rand_m = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let ks: Vec<Matrix> = (0..heads).map(|_| rand_m(&mut rng, n, dk)).collect();
        let vs: Vec<Matrix> = (0..heads).map(|_| rand_m(&mut rng, n, dv)).collect();
        let qs: Vec<Matrix> = (0..heads).map(|_| rand_m(&mut rng, 1, dk)).collect();
        let mut cache = LayerCache::new(CachePolicy::streaming(sink, recent).unwrap(), heads, dk, dv);
        cache.append(&ks, &vs).unwrap();
        let got = cache.attend(&qs, &[n - 1], 1.0).unwrap();

        let kept = set_oracle(n, sink, recent);
        let mut expect = vec![0.0; dv];
        for h in 0..heads {
            let scores = matmul(&qs[h], &ks[h].transpose()).unwrap();
            let denom: f64 = kept.iter().map(|&j| scores.get(0, j).exp()).sum();
            for &j in &kept {
                let p = scores.get(0, j).exp() / denom;
                for c in 0..dv {
                    expect[c] += p * vs[h].get(j, c);
                }
            }
        }
        for (a, b) in got.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attend_needs_visible_keys() {
        let cache = LayerCache::new(CachePolicy::Full, 1, 1, 1);
        assert!(cache.attend(&[Matrix::zeros(1, 1)], &[0], 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn streaming_size_and_order_invariants(
                sink in 0usize..6,
                recent in 1usize..10,
                schedule in proptest::collection::vec(1usize..7, 1..25),
            ) {
                let mut cache = LayerCache::new(CachePolicy::streaming(sink, recent).unwrap(), 1, 1, 1);
                for t in schedule {
                    cache.append(&[Matrix::zeros(t, 1)], &[Matrix::zeros(t, 1)]).unwrap();
                    let kept = cache.kept_positions();
                    prop_assert!(kept.len() <= sink + recent);
                    prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(kept.iter().all(|&p| p < cache.total_seen()));
                    prop_assert_eq!(&kept, &set_oracle(cache.total_seen(), sink, recent));
                    prop_assert_eq!(kept, streaming_kept(cache.total_seen(), sink, recent));
                }
            }

            #[test]
            fn transfer_then_append_is_path_independent(
                sink in 0usize..5,
                recent in 1usize..9,
                before in 1usize..30,
                after in 0usize..12,
            ) {
                let mut a = LayerCache::new(CachePolicy::Full, 1, 1, 1);
                a.append(&[Matrix::zeros(before, 1)], &[Matrix::zeros(before, 1)]).unwrap();
                a.transfer_to_streaming(sink, recent).unwrap();
                let mut b = LayerCache::new(CachePolicy::streaming(sink, recent).unwrap(), 1, 1, 1);
                b.append(&[Matrix::zeros(before, 1)], &[Matrix::zeros(before, 1)]).unwrap();
                for _ in 0..after {
                    a.append(&[Matrix::zeros(1, 1)], &[Matrix::zeros(1, 1)]).unwrap();
                    b.append(&[Matrix::zeros(1, 1)], &[Matrix::zeros(1, 1)]).unwrap();
                }
                prop_assert_eq!(a.kept_positions(), b.kept_positions());
            }
        }
    }
}
