//! Prefill/decode orchestration over per-layer caches.
//!
//! Online sessions compute each layer's lazy ratio right after that layer's
//! prefill attention and push it into a queue holding at most `P` layers.
//! Whenever the queue overflows, the popped layer's cache is cut to the
//! streaming window on the spot, so at most `P + 1` full caches ever exist.
//! Hidden states already computed are never revisited: prefill output is
//! exact and the reduced caches only affect decoding.
//!
//! Static sessions take the lazy set from a [`PolicyFile`] and cut each lazy
//! layer's cache as soon as that layer has been prefilled.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::kvcache::{streaming_allowed, CachePolicy, LayerCache, MemoryMeter, MemoryStats};
use crate::lazydetect::{
    average_ratio, lazy_ratio_lse, DetectParams, IdentifierState, LazyRatioReport, LayerSplit,
};
use crate::model::{attention_pass, embed, ffn_row, ln, ln_rows, ffn_residual, Weights};
use crate::numerics::{logsumexp, vec_mat, MaskSpec, Matrix};
use crate::policy::PolicyFile;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySource {
    /// Identify lazy layers on the fly during prefill.
    Online,
    /// Use a fixed policy; no identification work.
    Static(PolicyFile),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineParams {
    pub detect: DetectParams,
    pub source: PolicySource,
    pub max_new_tokens: usize,
}

impl EngineParams {
    pub fn online(detect: DetectParams) -> Self {
        Self {
            detect,
            source: PolicySource::Online,
            max_new_tokens: 0,
        }
    }

    pub fn fixed(detect: DetectParams, policy: PolicyFile) -> Self {
        Self {
            detect,
            source: PolicySource::Static(policy),
            max_new_tokens: 0,
        }
    }
}

/// Wall-clock split of one prefill.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefillTiming {
    pub total: Duration,
    /// Time spent computing lazy ratios and updating the queue.
    pub identification: Duration,
}

impl PrefillTiming {
    /// `identification / (total - identification)`: the slowdown the
    /// identification work adds to an otherwise identical prefill.
    pub fn relative_overhead(&self) -> f64 {
        let base = self.total.saturating_sub(self.identification).as_secs_f64();
        if base == 0.0 {
            return 0.0;
        }
        self.identification.as_secs_f64() / base
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Logits of the last prompt position.
    pub logits: Vec<f64>,
    /// Present for online sessions.
    pub report: Option<LazyRatioReport>,
    pub timing: PrefillTiming,
}

/// One request's inference state.
#[derive(Debug, Clone)]
pub struct Session<'w> {
    weights: &'w Weights,
    params: EngineParams,
    caches: Vec<LayerCache>,
    identifier: Option<IdentifierState>,
    meter: MemoryMeter,
    tokens: Vec<u32>,
    prompt_len: Option<usize>,
    full_cache_peak: usize,
    decode_times: Vec<Duration>,
}

impl<'w> Session<'w> {
    pub fn new(weights: &'w Weights, params: EngineParams) -> Result<Self> {
        let cfg = &weights.config;
        params.detect.validate(cfg.layers)?;
        let identifier = match &params.source {
            PolicySource::Online => Some(IdentifierState::new(params.detect.keep_full)),
            PolicySource::Static(policy) => {
                policy.validate(cfg.layers)?;
                None
            }
        };
        let caches = (0..cfg.layers)
            .map(|_| LayerCache::new(CachePolicy::Full, cfg.heads, cfg.d_head, cfg.d_model))
            .collect();
        Ok(Self {
            weights,
            params,
            caches,
            identifier,
            meter: MemoryMeter::new(cfg.layers),
            tokens: Vec::new(),
            prompt_len: None,
            full_cache_peak: 0,
            decode_times: Vec::new(),
        })
    }

    pub fn caches(&self) -> &[LayerCache] {
        &self.caches
    }

    pub fn memory(&self) -> MemoryStats {
        self.meter.stats()
    }

    /// Most full-policy caches holding rows at the same time.
    pub fn full_cache_peak(&self) -> usize {
        self.full_cache_peak
    }

    /// Prompt plus everything fed through `decode_step`.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn decode_times(&self) -> &[Duration] {
        &self.decode_times
    }

    /// Layers currently on a streaming cache.
    pub fn lazy_layers(&self) -> Vec<usize> {
        (0..self.caches.len())
            .filter(|&i| !self.caches[i].policy().is_full())
            .collect()
    }

    /// Policy that reproduces this session's cache layout in static mode.
    pub fn to_policy(&self, fingerprint: &str, provenance: crate::policy::Provenance) -> PolicyFile {
        let d = &self.params.detect;
        PolicyFile::new(fingerprint, self.lazy_layers(), d.w_sink, d.w_recent, provenance)
    }

    fn streaming_policy_for(&self, layer: usize) -> CachePolicy {
        match &self.params.source {
            PolicySource::Static(p) => p.layer_policy(layer),
            PolicySource::Online => CachePolicy::Streaming {
                sink: self.params.detect.w_sink,
                recent: self.params.detect.w_recent,
            },
        }
    }

    fn shrink(&mut self, layer: usize) -> Result<()> {
        if let CachePolicy::Streaming { sink, recent } = self.streaming_policy_for(layer) {
            self.caches[layer].transfer_to_streaming(sink, recent)?;
            self.meter.record(layer, self.caches[layer].len());
        }
        Ok(())
    }

    fn note_full_caches(&mut self) {
        let live = self
            .caches
            .iter()
            .filter(|c| c.policy().is_full() && !c.is_empty())
            .count();
        self.full_cache_peak = self.full_cache_peak.max(live);
    }

    /// Runs the prompt through every layer, filling caches and (online)
    /// transferring lazy layers as the queue overflows.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<PrefillOutput> {
        if self.prompt_len.is_some() {
            return contract("session already prefilled");
        }
        if tokens.is_empty() {
            return input("empty prompt");
        }
        let started = Instant::now();
        let mut ident_time = Duration::ZERO;
        let cfg = &self.weights.config;
        let detect = self.params.detect;
        let n = tokens.len();
        let query_rows: Vec<usize> = detect.query_rows(n).collect();
        let scale = cfg.logit_scale();
        let mut ratios = Vec::with_capacity(cfg.layers);
        let mut head_log_ratios = Vec::with_capacity(cfg.layers);

        let mut x = embed(tokens, self.weights)?;
        for (i, layer) in self.weights.layers.iter().enumerate() {
            let xn = ln_rows(&x, cfg.norm);
            let pass = attention_pass(&xn, layer, &MaskSpec::Causal, cfg)?;
            let keys: Vec<Matrix> = pass.heads.iter().map(|h| h.k.clone()).collect();
            let values: Vec<Matrix> = pass.heads.iter().map(|h| h.v.clone()).collect();
            self.caches[i].append(&keys, &values)?;
            self.meter.record(i, self.caches[i].len());
            self.note_full_caches();

            if self.identifier.is_some() {
                let t0 = Instant::now();
                let q_last: Vec<Matrix> = pass.heads.iter().map(|h| h.q.select_rows(&query_rows)).collect();
                let lse_last: Vec<Vec<f64>> = pass
                    .lse
                    .iter()
                    .map(|l| query_rows.iter().map(|&r| l[r]).collect())
                    .collect();
                let ratio = lazy_ratio_lse(&q_last, &keys, &lse_last, &detect, scale)?;
                let popped = self
                    .identifier
                    .as_mut()
                    .expect("online session")
                    .push(i, ratio.ratio)?;
                ident_time += t0.elapsed();
                ratios.push(ratio.ratio);
                head_log_ratios.push(ratio.log_ratios);
                if let Some(j) = popped {
                    self.shrink(j)?;
                }
            } else if let PolicySource::Static(p) = &self.params.source {
                if p.is_lazy(i) {
                    self.shrink(i)?;
                }
            }

            let y = x.add(&pass.mha_out)?;
            x = ffn_residual(&y, layer, cfg);
        }
        let logits = vec_mat(x.row(n - 1), &self.weights.w_unemb);

        let report = match &self.identifier {
            Some(state) => {
                let LayerSplit { non_lazy, lazy } = state.finalize(cfg.layers)?;
                Some(LazyRatioReport {
                    params: detect,
                    ratios,
                    head_log_ratios,
                    lazy_layers: lazy,
                    non_lazy_layers: non_lazy,
                    pop_order: state.popped().to_vec(),
                })
            }
            None => None,
        };
        self.tokens.extend_from_slice(tokens);
        self.prompt_len = Some(n);
        Ok(PrefillOutput {
            logits,
            report,
            timing: PrefillTiming {
                total: started.elapsed(),
                identification: ident_time,
            },
        })
    }

    /// Feeds one token through every layer using (and extending) the
    /// layer caches; returns the next-token logits.
    pub fn decode_step(&mut self, token: u32) -> Result<Vec<f64>> {
        Ok(self.decode_inner(token, false)?.0)
    }

    /// Like [`decode_step`](Self::decode_step), and also returns, per layer,
    /// the head-averaged share of the new query's attention that falls on
    /// its streaming-kept keys among the rows that layer still caches.
    pub fn decode_step_with_ratios(&mut self, token: u32) -> Result<(Vec<f64>, Vec<f64>)> {
        self.decode_inner(token, true)
    }

    fn decode_inner(&mut self, token: u32, with_ratios: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.prompt_len.is_none() {
            return contract("decode_step called before prefill");
        }
        let started = Instant::now();
        let w = self.weights;
        let cfg = &w.config;
        let pos = self.tokens.len();
        let scale = cfg.logit_scale();
        let mut x = embed(&[token], w)?.into_data();
        let mut ratios = Vec::new();
        for (i, layer) in w.layers.iter().enumerate() {
            let xn = ln(&x, cfg.norm);
            let mut queries = Vec::with_capacity(cfg.heads);
            let mut keys = Vec::with_capacity(cfg.heads * cfg.d_head);
            let mut values = Vec::with_capacity(cfg.heads * cfg.d_model);
            for h in &layer.heads {
                queries.push(vec_mat(&xn, &h.w_q));
                keys.extend(vec_mat(&xn, &h.w_k));
                values.extend(vec_mat(&xn, &h.w_v));
            }
            let cache = &mut self.caches[i];
            cache.push_token(keys, values)?;
            let att = cache.attend_one(queries.iter().map(|q| q.as_slice()), cache.len(), scale);
            if with_ratios {
                ratios.push(kept_share(cache, &queries, pos, &self.params.detect, scale));
            }
            self.meter.record(i, self.caches[i].len());
            let y: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
            let f = ffn_row(&ln(&y, cfg.norm), layer, cfg.activation);
            x = y.iter().zip(&f).map(|(a, b)| a + b).collect();
        }
        self.tokens.push(token);
        let logits = vec_mat(&x, &w.w_unemb);
        self.decode_times.push(started.elapsed());
        Ok((logits, ratios))
    }

    /// Greedy continuation of `prompt`: prefill, then repeatedly take the
    /// arg-max token (smallest id on ties) and feed it back.
    pub fn generate_greedy(&mut self, prompt: &[u32], max_new_tokens: usize) -> Result<Generation> {
        let prefill = self.prefill(prompt)?;
        let mut logits = prefill.logits.clone();
        let mut out = Vec::with_capacity(max_new_tokens);
        for step in 0..max_new_tokens {
            let next = argmax(&logits);
            out.push(next);
            if step + 1 < max_new_tokens {
                logits = self.decode_step(next)?;
            }
        }
        Ok(Generation {
            tokens: out,
            prefill,
        })
    }

    /// Cuts the named layers to streaming caches after the fact (used by
    /// benchmarks to derive hybrid variants from one shared prefill).
    pub fn convert_layers(&mut self, layers: &[usize], sink: usize, recent: usize) -> Result<()> {
        for &l in layers {
            let Some(cache) = self.caches.get_mut(l) else {
                return contract(format!("layer {l} out of range"));
            };
            cache.transfer_to_streaming(sink, recent)?;
            self.meter.record(l, cache.len());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub prefill: PrefillOutput,
}

/// Index of the largest logit; the smallest index wins ties.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn kept_share(cache: &LayerCache, queries: &[Vec<f64>], pos: usize, detect: &DetectParams, scale: f64) -> f64 {
    let kept = streaming_allowed(pos, detect.w_sink, detect.w_recent);
    let positions = cache.kept_positions();
    let mask: Vec<bool> = positions.iter().map(|p| kept.binary_search(p).is_ok()).collect();
    let log_ratios: Vec<Vec<f64>> = queries
        .iter()
        .enumerate()
        .map(|(h, q)| {
            let scores = cache.head_scores(h, q, scale);
            let kept_scores: Vec<f64> = scores
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(s, _)| *s)
                .collect();
            vec![logsumexp(&kept_scores) - logsumexp(&scores)]
        })
        .collect();
    average_ratio(&log_ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, random_init, ModelConfig};
    use crate::policy::Provenance;

    fn detect(p: usize, sink: usize, recent: usize) -> DetectParams {
        DetectParams {
            w_last: 8,
            w_sink: sink,
            w_recent: recent,
            keep_full: p,
        }
    }

    fn prompt(n: usize, vocab: u32, seed: u32) -> Vec<u32> {
        (0..n as u32).map(|i| (i.wrapping_mul(2654435761) ^ seed) % vocab).collect()
    }

    #[test]
    fn keep_all_layers_matches_full_forward_bitwise() {
        let cfg = ModelConfig::practical(3, 2, 8, 4, 32);
        let w = random_init(&cfg, 1, 0.5).unwrap();
        let toks = prompt(40, 32, 7);
        let mut s = Session::new(&w, EngineParams::online(detect(3, 2, 8))).unwrap();
        let out = s.prefill(&toks).unwrap();
        let full = forward_full(&toks, &w).unwrap();
        assert_eq!(out.logits.as_slice(), full.last_logits());
        let report = out.report.unwrap();
        assert!(report.lazy_layers.is_empty());
        assert_eq!(report.ratios.len(), 3);
    }

    #[test]
    fn full_decode_matches_recompute() {
        let cfg = ModelConfig::practical(2, 2, 8, 4, 32);
        let w = random_init(&cfg, 2, 0.5).unwrap();
        let toks = prompt(20, 32, 3);
        let mut s = Session::new(&w, EngineParams::online(detect(2, 2, 4))).unwrap();
        s.prefill(&toks).unwrap();
        let mut seq = toks.clone();
        for t in [5u32, 9, 31, 0] {
            let logits = s.decode_step(t).unwrap();
            seq.push(t);
            let full = forward_full(&seq, &w).unwrap();
            for (a, b) in logits.iter().zip(full.last_logits()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn online_prefill_respects_queue_peak() {
        let cfg = ModelConfig::practical(4, 2, 8, 4, 32);
        let w = random_init(&cfg, 3, 0.6).unwrap();
        let toks = prompt(64, 32, 1);
        let mut s = Session::new(&w, EngineParams::online(detect(2, 2, 8))).unwrap();
        let out = s.prefill(&toks).unwrap();
        let report = out.report.unwrap();
        assert!(s.full_cache_peak() <= 3);
        assert_eq!(report.lazy_layers.len(), 2);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| report.ratios[b].total_cmp(&report.ratios[a]).then(b.cmp(&a)));
        let mut top: Vec<usize> = order[..2].to_vec();
        top.sort_unstable();
        assert_eq!(report.lazy_layers, top);
        assert_eq!(s.lazy_layers(), top);
        for &l in &top {
            assert_eq!(s.caches()[l].len(), 10);
        }
    }

    #[test]
    fn decode_before_prefill_is_contract_error() {
        let cfg = ModelConfig::practical(1, 1, 4, 2, 8);
        let w = random_init(&cfg, 3, 0.6).unwrap();
        let mut s = Session::new(&w, EngineParams::online(detect(1, 1, 2))).unwrap();
        assert!(matches!(s.decode_step(1), Err(crate::LazyKvError::Contract(_))));
        assert!(matches!(s.prefill(&[]), Err(crate::LazyKvError::Input(_))));
    }

    #[test]
    fn greedy_generation_basics() {
        let cfg = ModelConfig::practical(2, 2, 8, 4, 16);
        let w = random_init(&cfg, 4, 0.8).unwrap();
        let toks = prompt(12, 16, 5);
        let mut s = Session::new(&w, EngineParams::online(detect(1, 2, 4))).unwrap();
        assert!(s.generate_greedy(&toks, 0).unwrap().tokens.is_empty());
        let run = |p: usize| {
            let mut s = Session::new(&w, EngineParams::online(detect(p, 2, 4))).unwrap();
            s.generate_greedy(&toks, 10).unwrap().tokens
        };
        assert_eq!(run(1), run(1));
        assert_eq!(run(2).len(), 10);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, -1.0]), 1);
    }

    #[test]
    fn static_replay_matches_online() {
        let cfg = ModelConfig::practical(4, 2, 8, 4, 32);
        let w = random_init(&cfg, 9, 0.7).unwrap();
        let toks = prompt(48, 32, 9);
        let d = detect(2, 2, 6);
        let mut online = Session::new(&w, EngineParams::online(d)).unwrap();
        let a = online.generate_greedy(&toks, 12).unwrap();
        let policy = online.to_policy("fp", Provenance::Online);
        let mut fixed = Session::new(&w, EngineParams::fixed(d, policy)).unwrap();
        let b = fixed.generate_greedy(&toks, 12).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(b.prefill.report.is_none());
        assert_eq!(online.lazy_layers(), fixed.lazy_layers());
    }

    #[test]
    fn relative_overhead_math() {
        let t = PrefillTiming {
            total: Duration::from_millis(110),
            identification: Duration::from_millis(10),
        };
        assert!((t.relative_overhead() - 0.1).abs() < 1e-12);
        assert_eq!(PrefillTiming::default().relative_overhead(), 0.0);
    }
}
