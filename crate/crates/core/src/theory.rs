//! Numerical checks of the hidden-state and logit error bounds for a
//! transformer whose lazy layers attend only to a subset of keys, plus
//! randomized oracles for the supporting softmax / norm lemmas.
//!
//! Everything here runs two complete masked forward passes (original and
//! modified network) rather than the cache engine, and requires the
//! clip-norm, unscaled-logit configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::kvcache::streaming_allowed;
use crate::model::{
    embed, forward_with_masks, ln_rows, mha_forward, param_norm_bound, random_init, Activation,
    ModelConfig, Weights,
};
use crate::numerics::{
    dot, masked_row_softmax, matmul, row_2inf_norm, softmax, frobenius_norm, MaskSpec, Matrix,
};

/// Slack allowed on every bound comparison.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    /// Largest Frobenius norm over all parameter matrices.
    pub b: f64,
    pub heads: usize,
    pub layers: usize,
    pub l_lip: f64,
}

impl TheoremConstants {
    pub fn for_weights(weights: &Weights) -> Self {
        Self {
            b: param_norm_bound(weights),
            heads: weights.config.heads,
            layers: weights.config.layers,
            l_lip: weights.config.activation.lipschitz(),
        }
    }

    fn h(&self) -> f64 {
        self.heads as f64
    }

    /// Multiplier of the (clipped) propagated error.
    pub fn c_step(&self) -> f64 {
        let (b, h) = (self.b, self.h());
        h * b + self.l_lip * b * b + 4.0 * h * b.powi(3)
    }

    /// Amplification of the previous error inside the clip.
    pub fn c_amp(&self) -> f64 {
        let (b, h) = (self.b, self.h());
        1.0 + h * b * (1.0 + 4.0 * b * b)
    }

    /// Multiplier of the discarded mass at a lazy layer.
    pub fn c_new(&self) -> f64 {
        let (b, h) = (self.b, self.h());
        2.0 * h * (b + self.l_lip * b.powi(3))
    }

    pub fn c_logit_const(&self) -> f64 {
        let (b, h) = (self.b, self.h());
        2.0 * self.layers as f64 * b * b * (h + self.l_lip * b + 4.0 * h * b * b)
    }

    pub fn c_logit_mass(&self) -> f64 {
        let (b, h) = (self.b, self.h());
        2.0 * h * b * b * (1.0 + self.l_lip * b * b)
    }

    /// Right-hand side of the per-layer recursion.
    pub fn recursive_rhs(&self, e_prev: f64, lazy: bool, s: f64) -> f64 {
        let new = if lazy { self.c_new() * s } else { 0.0 };
        e_prev + self.c_step() * f64::min(2.0, self.c_amp() * e_prev) + new
    }

    pub fn logit_rhs(&self, total_mass: f64) -> f64 {
        self.c_logit_const() + self.c_logit_mass() * total_mass
    }
}

fn require_theory_config(config: &ModelConfig) -> Result<()> {
    if !config.is_theory_exact() {
        return contract("theory checks need clip-norm and unscaled attention logits");
    }
    Ok(())
}

/// Largest head-averaged causal attention mass that any query row of layer
/// `layer` puts on positions outside `kept` (computed on `x_prev`, the
/// unmodified input of that layer).
pub fn discarded_mass(layer: usize, x_prev: &Matrix, weights: &Weights, kept: &MaskSpec) -> Result<f64> {
    let cfg = &weights.config;
    require_theory_config(cfg)?;
    let n = x_prev.rows();
    kept.validate(n, n)?;
    let xn = ln_rows(x_prev, cfg.norm);
    let lw = &weights.layers[layer];
    let mut per_row = vec![0.0; n];
    for head in &lw.heads {
        let q = matmul(&xn, &head.w_q)?;
        let k = matmul(&xn, &head.w_k)?;
        let attn = masked_row_softmax(&matmul(&q, &k.transpose())?, &MaskSpec::Causal)?;
        for (i, acc) in per_row.iter_mut().enumerate() {
            let allowed: Vec<usize> = kept.allowed(i).iter().collect();
            let dropped: f64 = (0..=i)
                .filter(|j| allowed.binary_search(j).is_err())
                .map(|j| attn.get(i, j))
                .sum();
            *acc += dropped;
        }
    }
    let h = cfg.heads as f64;
    Ok(per_row.iter().map(|v| v / h).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    /// `e_x[i] = ||X^(i) - X~^(i)||_{2,inf}`, `e_x[0] = 0`.
    pub e_x: Vec<f64>,
    /// `s[i - 1]` for layer `i` (1-based); zero outside the lazy set.
    pub s: Vec<f64>,
    pub logit_error: f64,
    /// Zero-based indices of the masked layers.
    pub lazy_layers: Vec<usize>,
    /// `||W_unemb||_F`.
    pub unemb_norm: f64,
}

/// Runs the original and the masked network on `tokens`; `lazy_layers`
/// (zero-based) use `kept` instead of the causal mask.
pub fn run_pair(weights: &Weights, tokens: &[u32], lazy_layers: &[usize], kept: &MaskSpec) -> Result<ErrorTrace> {
    let cfg = &weights.config;
    require_theory_config(cfg)?;
    if let Some(&l) = lazy_layers.iter().find(|&&l| l >= cfg.layers) {
        return contract(format!("lazy layer {l} out of range"));
    }
    let x0 = embed(tokens, weights)?;
    let n = x0.rows();
    kept.validate(n, n)?;
    let causal = vec![MaskSpec::Causal; cfg.layers];
    let mut masked = causal.clone();
    for &l in lazy_layers {
        masked[l] = kept.clone();
    }
    let original = forward_with_masks(&x0, weights, &causal)?;
    let modified = forward_with_masks(&x0, weights, &masked)?;
    let e_x = original
        .x
        .iter()
        .zip(&modified.x)
        .map(|(a, b)| Ok(row_2inf_norm(&a.sub(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut s = vec![0.0; cfg.layers];
    for &l in lazy_layers {
        s[l] = discarded_mass(l, &original.x[l], weights, kept)?;
    }
    let mut lazy: Vec<usize> = lazy_layers.to_vec();
    lazy.sort_unstable();
    lazy.dedup();
    Ok(ErrorTrace {
        e_x,
        s,
        logit_error: row_2inf_norm(&original.logits.sub(&modified.logits)?),
        lazy_layers: lazy,
        unemb_norm: frobenius_norm(&weights.w_unemb),
    })
}

/// Streaming kept sets (`sink` first tokens plus `recent` window) for `n` rows.
pub fn streaming_mask(n: usize, sink: usize, recent: usize) -> MaskSpec {
    MaskSpec::LazySet((0..n).map(|i| streaming_allowed(i, sink, recent)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundMargins {
    /// `rhs - e_x[i]` for layers 1..=L.
    pub recursive: Vec<f64>,
    pub logit: f64,
    /// `||W_unemb||_F * e_x[L] - logit_error`.
    pub unemb: f64,
}

impl BoundMargins {
    pub fn min_margin(&self) -> f64 {
        self.recursive
            .iter()
            .copied()
            .chain([self.logit, self.unemb])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn passed(&self) -> bool {
        self.min_margin() >= -BOUND_TOL
    }
}

pub fn check_recursive_bound(trace: &ErrorTrace, c: &TheoremConstants) -> Vec<f64> {
    (1..trace.e_x.len())
        .map(|i| {
            let lazy = trace.lazy_layers.binary_search(&(i - 1)).is_ok();
            c.recursive_rhs(trace.e_x[i - 1], lazy, trace.s[i - 1]) - trace.e_x[i]
        })
        .collect()
}

pub fn check_logit_bound(trace: &ErrorTrace, c: &TheoremConstants) -> f64 {
    let mass: f64 = trace.lazy_layers.iter().map(|&l| trace.s[l]).sum();
    c.logit_rhs(mass) - trace.logit_error
}

pub fn check_bounds(trace: &ErrorTrace, c: &TheoremConstants) -> BoundMargins {
    let e_last = trace.e_x.last().copied().unwrap_or(0.0);
    BoundMargins {
        recursive: check_recursive_bound(trace, c),
        logit: check_logit_bound(trace, c),
        unemb: trace.unemb_norm * e_last - trace.logit_error,
    }
}

/// Ranges for randomized theorem trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialLimits {
    pub max_layers: usize,
    pub max_heads: usize,
    pub max_dim: usize,
    pub max_tokens: usize,
    pub max_b: f64,
}

impl Default for TrialLimits {
    fn default() -> Self {
        Self {
            max_layers: 4,
            max_heads: 3,
            max_dim: 8,
            max_tokens: 24,
            max_b: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub config: ModelConfig,
    pub tokens: usize,
    pub w_sink: usize,
    pub w_recent: usize,
    pub constants: TheoremConstants,
    pub trace: ErrorTrace,
    pub margins: BoundMargins,
    pub min_margin: f64,
    pub passed: bool,
}

/// One random theorem trial. Every fourth trial uses an empty lazy set.
pub fn theorem_trial(seed: u64, limits: &TrialLimits) -> Result<TrialReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(1..=limits.max_layers);
    let heads = rng.gen_range(1..=limits.max_heads);
    let d = rng.gen_range(2..=limits.max_dim);
    let dk = rng.gen_range(1..=d);
    let vocab = rng.gen_range(4..=16);
    let mut config = ModelConfig::theory(layers, heads, d, dk, vocab);
    config.activation = [Activation::Relu, Activation::Gelu, Activation::Sigmoid][rng.gen_range(0..3)];
    let mut weights = random_init(&config, rng.gen(), 1.0)?;
    // Rescale parameters (not the embedding) to hit a target B.
    let target_b = rng.gen_range(0.05..=limits.max_b);
    let b0 = param_norm_bound(&weights);
    if b0 > 0.0 {
        weights.scale_parameters(target_b / b0);
    }
    // Large embeddings exercise the clip; small ones the identity branch.
    let emb_scale = rng.gen_range(0.2..3.0);
    weights.embedding = weights.embedding.scaled(emb_scale);

    let n = rng.gen_range(1..=limits.max_tokens);
    let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect();
    let w_sink = rng.gen_range(0..=2);
    let w_recent = rng.gen_range(1..=6);
    let lazy: Vec<usize> = if seed % 4 == 0 {
        Vec::new()
    } else {
        (0..layers).filter(|_| rng.gen_bool(0.5)).collect()
    };
    let trace = run_pair(&weights, &tokens, &lazy, &streaming_mask(n, w_sink, w_recent))?;
    let constants = TheoremConstants::for_weights(&weights);
    let margins = check_bounds(&trace, &constants);
    Ok(TrialReport {
        seed,
        config,
        tokens: n,
        w_sink,
        w_recent,
        constants,
        trace,
        min_margin: margins.min_margin(),
        passed: margins.passed(),
        margins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lemma {
    /// Softmax is 2-Lipschitz from l_inf to l_1.
    SoftmaxLipschitz,
    /// Hölder-type matrix-vector norm bounds.
    MatVec,
    /// Lipschitz constant of multi-head attention.
    MhaLipschitz,
    /// Output change from truncating a set of keys.
    Truncation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: Lemma,
    pub trials: usize,
    pub violations: usize,
    /// Smallest `rhs - lhs` observed.
    pub min_margin: f64,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, rand_vec(rng, rows * cols, scale)).expect("sized")
}

fn lp_norm(x: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        x.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `||A||_{p,q}`: l_p of each row, then l_q across rows.
fn mixed_norm(a: &Matrix, p: f64, q: f64) -> f64 {
    let rows: Vec<f64> = a.iter_rows().map(|r| lp_norm(r, p)).collect();
    lp_norm(&rows, q)
}

fn conjugate(u: f64) -> f64 {
    if u == 1.0 {
        f64::INFINITY
    } else if u.is_infinite() {
        1.0
    } else {
        u / (u - 1.0)
    }
}

/// Returns `(lhs, rhs)` for one random instance of `lemma`.
fn lemma_instance(lemma: Lemma, rng: &mut ChaCha8Rng, trial: usize) -> Result<(f64, f64)> {
    match lemma {
        Lemma::SoftmaxLipschitz => {
            let n = rng.gen_range(1..=8);
            let scale = rng.gen_range(0.1..6.0);
            let x = rand_vec(rng, n, scale);
            let y = if trial % 10 == 0 { x.clone() } else { rand_vec(rng, n, scale) };
            let diff: Vec<f64> = softmax(&x).iter().zip(softmax(&y)).map(|(a, b)| a - b).collect();
            let inf: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            Ok((lp_norm(&diff, 1.0), 2.0 * lp_norm(&inf, f64::INFINITY)))
        }
        Lemma::MatVec => {
            const P: [f64; 4] = [1.0, 2.0, 3.0, f64::INFINITY];
            let (r, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let a = rand_matrix(rng, r, c, 2.0);
            let x = rand_vec(rng, c, 2.0);
            let p = P[rng.gen_range(0..4)];
            let u = P[rng.gen_range(0..4)];
            let v = conjugate(u);
            let ax: Vec<f64> = a.iter_rows().map(|row| dot(row, &x)).collect();
            let lhs = lp_norm(&ax, p);
            let rhs = if trial % 2 == 0 {
                mixed_norm(&a.transpose(), p, u) * lp_norm(&x, v)
            } else {
                mixed_norm(&a, u, p) * lp_norm(&x, v)
            };
            Ok((lhs, rhs))
        }
        Lemma::MhaLipschitz => {
            let heads = rng.gen_range(1..=3);
            let d = rng.gen_range(1..=8);
            let dk = rng.gen_range(1..=d);
            let n = rng.gen_range(1..=8);
            let mut cfg = ModelConfig::theory(1, heads, d, dk, 2);
            cfg.activation = Activation::Relu;
            let w = random_init(&cfg, rng.gen(), rng.gen_range(0.05..0.8))?;
            let layer = &w.layers[0];
            let bx = rng.gen_range(0.1..1.5);
            let clip = |m: Matrix| -> Matrix {
                let rows: Vec<Vec<f64>> = m
                    .iter_rows()
                    .map(|r| {
                        let norm = lp_norm(r, 2.0);
                        if norm > bx { r.iter().map(|v| v * bx / norm).collect() } else { r.to_vec() }
                    })
                    .collect();
                Matrix::from_rows(&rows).expect("rows")
            };
            let x = clip(rand_matrix(rng, n, d, 1.0));
            let step = rng.gen_range(0.001..0.5);
            let x2 = clip(x.add(&rand_matrix(rng, n, d, step))?);
            let a = mha_forward(&x, layer, &MaskSpec::Causal, &cfg)?;
            let b = mha_forward(&x2, layer, &MaskSpec::Causal, &cfg)?;
            let norms = |f: fn(&crate::model::HeadWeights) -> &Matrix| {
                layer.heads.iter().map(|h| frobenius_norm(f(h))).fold(0.0, f64::max)
            };
            let (bq, bk, bv) = (norms(|h| &h.w_q), norms(|h| &h.w_k), norms(|h| &h.w_v));
            let lhs = row_2inf_norm(&a.sub(&b)?);
            let rhs = heads as f64 * bv * (1.0 + 4.0 * bx * bx * bq * bk) * row_2inf_norm(&x.sub(&x2)?);
            Ok((lhs, rhs))
        }
        Lemma::Truncation => {
            let d = rng.gen_range(1..=8);
            let n1 = rng.gen_range(1..=8);
            let n2 = if trial % 10 == 0 { 0 } else { rng.gen_range(1..=8) };
            let scale = rng.gen_range(0.1..3.0);
            let q = rand_vec(rng, d, scale);
            let k1 = rand_matrix(rng, n1, d, scale);
            let k2 = rand_matrix(rng, n2, d, scale);
            let v1 = rand_matrix(rng, n1, d, 2.0);
            let v2 = rand_matrix(rng, n2, d, 2.0);
            let s1: Vec<f64> = k1.iter_rows().map(|k| dot(&q, k)).collect();
            let s_all: Vec<f64> = s1.iter().copied().chain(k2.iter_rows().map(|k| dot(&q, k))).collect();
            let p1 = softmax(&s1);
            let p_all = softmax(&s_all);
            let mut diff = vec![0.0; d];
            for (j, row) in v1.iter_rows().enumerate() {
                for (o, v) in diff.iter_mut().zip(row) {
                    *o += (p1[j] - p_all[j]) * v;
                }
            }
            for (j, row) in v2.iter_rows().enumerate() {
                for (o, v) in diff.iter_mut().zip(row) {
                    *o -= p_all[n1 + j] * v;
                }
            }
            let s2: f64 = p_all[n1..].iter().sum();
            let vmax = row_2inf_norm(&v1).max(if n2 == 0 { 0.0 } else { row_2inf_norm(&v2) });
            Ok((lp_norm(&diff, 2.0), 2.0 * s2 * vmax))
        }
    }
}

pub fn lemma_oracle(lemma: Lemma, trials: usize, seed: u64) -> Result<LemmaReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (lemma as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut violations = 0;
    let mut min_margin = f64::INFINITY;
    for t in 0..trials {
        let (lhs, rhs) = lemma_instance(lemma, &mut rng, t)?;
        if lhs > rhs + BOUND_TOL {
            violations += 1;
        }
        min_margin = min_margin.min(rhs - lhs + 0.0);
    }
    Ok(LemmaReport {
        lemma,
        trials,
        violations,
        min_margin,
    })
}

pub fn lemma_oracles(trials: usize, seed: u64) -> Result<Vec<LemmaReport>> {
    [Lemma::SoftmaxLipschitz, Lemma::MatVec, Lemma::MhaLipschitz, Lemma::Truncation]
        .into_iter()
        .map(|l| lemma_oracle(l, trials, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub limits: TrialLimits,
    pub trials: Vec<TrialReport>,
    pub lemmas: Vec<LemmaReport>,
    pub min_margin: f64,
    pub violations: usize,
    pub passed: bool,
}

/// Runs `trials` theorem trials (seeds `seed..seed + trials`) and the lemma
/// oracles with `lemma_trials` instances each.
pub fn verify_theory(trials: usize, lemma_trials: usize, limits: &TrialLimits, seed: u64) -> Result<TheoryReport> {
    let reports = (0..trials as u64)
        .into_par_iter()
        .map(|t| theorem_trial(seed.wrapping_add(t), limits))
        .collect::<Result<Vec<_>>>()?;
    let lemmas = lemma_oracles(lemma_trials, seed)?;
    let violations =
        reports.iter().filter(|r| !r.passed).count() + lemmas.iter().map(|l| l.violations).sum::<usize>();
    let min_margin = reports.iter().map(|r| r.min_margin).fold(f64::INFINITY, f64::min);
    Ok(TheoryReport {
        seed,
        limits: *limits,
        trials: reports,
        lemmas,
        min_margin,
        violations,
        passed: violations == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theory_weights(layers: usize, seed: u64, b: f64) -> Weights {
        let cfg = ModelConfig::theory(layers, 2, 6, 3, 10);
        let mut w = random_init(&cfg, seed, 1.0).unwrap();
        let b0 = param_norm_bound(&w);
        w.scale_parameters(b / b0);
        w
    }

    #[test]
    fn constants_transcription() {
        let c = TheoremConstants {
            b: 0.5,
            heads: 2,
            layers: 3,
            l_lip: 1.0,
        };
        assert!((c.c_step() - (1.0 + 0.25 + 1.0)).abs() < 1e-15);
        assert!((c.c_amp() - (1.0 + 1.0 * 2.0)).abs() < 1e-15);
        assert!((c.c_new() - 4.0 * (0.5 + 0.125)).abs() < 1e-15);
        assert!((c.c_logit_const() - 6.0 * 0.25 * (2.0 + 0.5 + 2.0)).abs() < 1e-15);
        assert!((c.c_logit_mass() - 4.0 * 0.25 * 1.25).abs() < 1e-15);
        let rhs = c.recursive_rhs(0.1, true, 0.3);
        assert!((rhs - (0.1 + c.c_step() * (c.c_amp() * 0.1).min(2.0) + c.c_new() * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn empty_lazy_set_gives_zero_trace() {
        let w = theory_weights(3, 1, 0.8);
        let toks = [1, 4, 2, 9, 0, 3];
        let t = run_pair(&w, &toks, &[], &streaming_mask(6, 1, 2)).unwrap();
        assert!(t.e_x.iter().all(|&e| e == 0.0));
        assert_eq!(t.logit_error, 0.0);
        let c = TheoremConstants::for_weights(&w);
        assert!((check_logit_bound(&t, &c) - c.c_logit_const()).abs() < 1e-15);
        // a vacuous mask changes nothing either
        let t = run_pair(&w, &toks, &[1], &streaming_mask(6, 2, 6)).unwrap();
        assert!(t.e_x.iter().all(|&e| e == 0.0));
        assert_eq!(t.s[1], 0.0);
    }

    #[test]
    fn discarded_mass_uniform_case() {
        // W_Q = 0 makes every row uniform: last row of 10 keys, 4 dropped -> 0.4
        let cfg = ModelConfig::theory(1, 1, 3, 2, 4);
        let mut w = random_init(&cfg, 3, 0.5).unwrap();
        w.layers[0].heads[0].w_q = Matrix::zeros(3, 2);
        let x = w.embedding.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
        let mut sets: Vec<Vec<usize>> = (0..10).map(|i| (0..=i).collect()).collect();
        sets[9] = vec![0, 1, 6, 7, 8, 9];
        let s = discarded_mass(0, &x, &w, &MaskSpec::LazySet(sets)).unwrap();
        assert!((s - 0.4).abs() < 1e-15);
        assert_eq!(discarded_mass(0, &x, &w, &MaskSpec::Causal).unwrap(), 0.0);
    }

    #[test]
    fn rejects_practical_config() {
        let cfg = ModelConfig::practical(1, 1, 3, 2, 4);
        let w = random_init(&cfg, 3, 0.5).unwrap();
        assert!(run_pair(&w, &[0, 1], &[0], &streaming_mask(2, 1, 1)).is_err());
    }

    #[test]
    fn random_trials_hold() {
        let limits = TrialLimits::default();
        for seed in 0..40 {
            let r = theorem_trial(seed, &limits).unwrap();
            assert!(r.passed, "seed {seed}: {:?}", r.margins);
            assert!(r.constants.b <= 1.2 + 1e-12);
            assert_eq!(r.trace.e_x[0], 0.0);
        }
    }

    #[test]
    fn lemmas_hold() {
        for r in lemma_oracles(200, 5).unwrap() {
            assert_eq!(r.violations, 0, "{r:?}");
        }
    }

    #[test]
    fn zero_weights_trivial() {
        let cfg = ModelConfig::theory(2, 1, 3, 2, 4);
        let w = random_init(&cfg, 0, 0.0).unwrap();
        let t = run_pair(&w, &[0, 1, 2], &[0], &streaming_mask(3, 0, 1)).unwrap();
        let c = TheoremConstants::for_weights(&w);
        assert_eq!(c.b, 0.0);
        let m = check_bounds(&t, &c);
        assert!(m.passed());
        assert_eq!(t.logit_error, 0.0);
    }
}
