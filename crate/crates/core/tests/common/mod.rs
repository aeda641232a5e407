//! Shared oracles and fixtures for the integration tests. Nothing here calls
//! the library's forward pass: the oracles are written from scratch.
#![allow(dead_code)]

use lazykv::model::{Activation, ModelConfig, NormMode, Weights};
use lazykv::numerics::Matrix;
use lazykv::offline::CorpusSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(x: &[f64], mode: NormMode) -> Vec<f64> {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    let div = match mode {
        NormMode::ClipNorm => sq.sqrt().max(1.0),
        NormMode::Rms => (sq / x.len() as f64 + 1e-6).sqrt(),
    };
    x.iter().map(|v| v / div).collect()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => if x > 0.0 { x } else { 0.0 },
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
        }
    }
}

fn times(x: &[f64], m: &Matrix) -> Vec<f64> {
    (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| x[r] * m.get(r, c)).sum())
        .collect()
}

pub struct NaiveTrace {
    /// `hidden[l][i]`: row `i` after `l` blocks.
    pub hidden: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

/// Masked forward pass with explicit loops; `allowed(layer, row)` lists
/// the key positions row `row` may attend to at `layer`.
pub fn naive_forward(w: &Weights, tokens: &[u32], allowed: &dyn Fn(usize, usize) -> Vec<usize>) -> NaiveTrace {
    let cfg = &w.config;
    let scale = match cfg.logit_scaling {
        lazykv::model::LogitScaling::None => 1.0,
        lazykv::model::LogitScaling::InvSqrtDk => 1.0 / (cfg.d_head as f64).sqrt(),
    };
    let mut x: Vec<Vec<f64>> = tokens.iter().map(|&t| w.embedding.row(t as usize).to_vec()).collect();
    let mut hidden = vec![x.clone()];
    for (l, layer) in w.layers.iter().enumerate() {
        let xn: Vec<Vec<f64>> = x.iter().map(|r| norm(r, cfg.norm)).collect();
        let mut y = x.clone();
        for h in &layer.heads {
            let q: Vec<Vec<f64>> = xn.iter().map(|r| times(r, &h.w_q)).collect();
            let k: Vec<Vec<f64>> = xn.iter().map(|r| times(r, &h.w_k)).collect();
            let v: Vec<Vec<f64>> = xn.iter().map(|r| times(r, &h.w_v)).collect();
            for i in 0..x.len() {
                let keys = allowed(l, i);
                let s: Vec<f64> = keys
                    .iter()
                    .map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (p, &j) in e.iter().zip(&keys) {
                    for c in 0..cfg.d_model {
                        y[i][c] += p / z * v[j][c];
                    }
                }
            }
        }
        x = y
            .iter()
            .map(|r| {
                let hid: Vec<f64> = times(&norm(r, cfg.norm), &layer.w_a1).into_iter().map(|v| act(cfg.activation, v)).collect();
                let f = times(&hid, &layer.w_a2);
                r.iter().zip(&f).map(|(a, b)| a + b).collect()
            })
            .collect();
        hidden.push(x.clone());
    }
    let logits = x.iter().map(|r| times(r, &w.w_unemb)).collect();
    NaiveTrace { hidden, logits }
}

pub fn causal(_: usize, i: usize) -> Vec<usize> {
    (0..=i).collect()
}

/// Sink-plus-window positions visible to query `i`.
pub fn window(i: usize, sink: usize, recent: usize) -> Vec<usize> {
    (0..=i).filter(|&j| j < sink || j + recent > i).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Token 0 is the needle.
pub const NEEDLE: u32 = 0;

/// A model whose residual stream never changes (zero values and FFN), with
/// every layer attending sharply to needle tokens except `uniform_layer`,
/// whose zero query/key weights give uniform attention.
pub fn needle_model(layers: usize, heads: usize, uniform_layer: usize, seed: u64) -> Weights {
    let (d, dk, vocab) = (8, 4, 24);
    let cfg = ModelConfig::theory(layers, heads, d, dk, vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::zeros(&cfg).unwrap();
    for t in 0..vocab {
        w.embedding.set(t, 0, 0.5);
        w.embedding.set(t, 1, if t as u32 == NEEDLE { 0.8 } else { 0.0 });
        for c in 2..d {
            w.embedding.set(t, c, rng.gen_range(-0.2..0.2));
        }
    }
    for (l, layer) in w.layers.iter_mut().enumerate() {
        if l == uniform_layer {
            continue;
        }
        for h in &mut layer.heads {
            let gain = rng.gen_range(15.0..25.0);
            h.w_q.set(0, 0, gain);
            h.w_k.set(1, 0, gain);
        }
    }
    for v in w.w_unemb.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    w
}

/// Samples of `len` random non-needle tokens with a few needles placed in
/// the middle third, far from both the sink and the final window.
pub fn needle_corpus(samples: usize, len: usize, seed: u64) -> Vec<CorpusSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let mut toks: Vec<u32> = (0..len).map(|_| rng.gen_range(1..24)).collect();
            for _ in 0..rng.gen_range(1..=3) {
                let p = rng.gen_range(len / 3..len / 2);
                toks[p] = NEEDLE;
            }
            let split = rng.gen_range(1..len);
            CorpusSample {
                question: toks[..split].to_vec(),
                answer: toks[split..].to_vec(),
            }
        })
        .collect()
}
