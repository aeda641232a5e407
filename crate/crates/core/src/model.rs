//! Pre-norm decoder-only transformer with the output projection merged into
//! the value projection.
//!
//! Block `i` maps `X_{i-1}` to
//! `Y_i = X_{i-1} + mha(LN(X_{i-1}))` and `X_i = Y_i + ffn(LN(Y_i))`, and the
//! logits are `X_L · W_unemb`. There are no positional encodings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, input, Result};
use crate::numerics::{dot, frobenius_norm, masked_attention, matmul, vec_mat, MaskSpec, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    /// Upper bound on `|σ(x) - σ(y)| / |x - y|`.
    ///
    /// GELU uses the tanh approximation, whose derivative peaks at about
    /// 1.12899; the constant is rounded up.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Relu => 1.0,
            Activation::Gelu => 1.13,
            Activation::Sigmoid => 0.25,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Identity inside the unit ball, projection onto it outside.
    ClipNorm,
    /// Divide by the root-mean-square (epsilon 1e-6), no gain.
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScaling {
    None,
    InvSqrtDk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab: usize,
    pub activation: Activation,
    pub norm: NormMode,
    pub logit_scaling: LogitScaling,
}

impl ModelConfig {
    /// Config that matches the analysed network exactly: clip norm and
    /// unscaled attention logits.
    pub fn theory(layers: usize, heads: usize, d_model: usize, d_head: usize, vocab: usize) -> Self {
        Self {
            layers,
            heads,
            d_model,
            d_head,
            vocab,
            activation: Activation::Relu,
            norm: NormMode::ClipNorm,
            logit_scaling: LogitScaling::None,
        }
    }

    /// Engine defaults: RMS norm and `1/sqrt(d_head)` scaling.
    pub fn practical(layers: usize, heads: usize, d_model: usize, d_head: usize, vocab: usize) -> Self {
        Self {
            activation: Activation::Gelu,
            norm: NormMode::Rms,
            logit_scaling: LogitScaling::InvSqrtDk,
            ..Self::theory(layers, heads, d_model, d_head, vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero-layer stack is allowed (embedding straight to logits).
        if self.heads == 0 || self.d_model == 0 || self.d_head == 0 || self.vocab == 0 {
            return input(format!(
                "heads, d_model, d_head and vocab must be >= 1 (got {}, {}, {}, {})",
                self.heads, self.d_model, self.d_head, self.vocab
            ));
        }
        Ok(())
    }

    pub fn is_theory_exact(&self) -> bool {
        self.norm == NormMode::ClipNorm && self.logit_scaling == LogitScaling::None
    }

    pub fn logit_scale(&self) -> f64 {
        match self.logit_scaling {
            LogitScaling::None => 1.0,
            LogitScaling::InvSqrtDk => 1.0 / (self.d_head as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d_model x d_head`
    pub w_q: Matrix,
    /// `d_model x d_head`
    pub w_k: Matrix,
    /// `d_model x d_model`, output projection folded in.
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub w_a1: Matrix,
    pub w_a2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// `vocab x d_model`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `d_model x vocab`
    pub w_unemb: Matrix,
}

impl Weights {
    /// All-zero weights of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        random_init(config, 0, 0.0)
    }

    /// Every matrix in storage order: embedding, per layer (per head
    /// `W_Q, W_K, W_V`, then `W_A1, W_A2`), then `W_unemb`.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            for h in &layer.heads {
                out.extend([&h.w_q, &h.w_k, &h.w_v]);
            }
            out.extend([&layer.w_a1, &layer.w_a2]);
        }
        out.push(&self.w_unemb);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.extend([&mut h.w_q, &mut h.w_k, &mut h.w_v]);
            }
            out.extend([&mut layer.w_a1, &mut layer.w_a2]);
        }
        out.push(&mut self.w_unemb);
        out
    }

    /// The parameters covered by the norm bound (everything but the embedding).
    pub fn parameter_matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.heads
                    .iter()
                    .flat_map(|h| [&h.w_q, &h.w_k, &h.w_v])
                    .chain([&l.w_a1, &l.w_a2])
            })
            .chain(std::iter::once(&self.w_unemb))
    }

    /// Multiplies every bounded parameter (not the embedding) by `factor`.
    pub fn scale_parameters(&mut self, factor: f64) {
        let mut all = self.matrices_mut();
        for m in all.iter_mut().skip(1) {
            **m = m.scaled(factor);
        }
    }
}

/// Largest Frobenius norm over the attention, feed-forward and unembedding
/// matrices.
pub fn param_norm_bound(weights: &Weights) -> f64 {
    weights
        .parameter_matrices()
        .map(frobenius_norm)
        .fold(0.0, f64::max)
}

/// Reproducible uniform(-scale, scale) weights. `scale == 0` gives exact zeros.
pub fn random_init(config: &ModelConfig, seed: u64, scale: f64) -> Result<Weights> {
    config.validate()?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return input(format!("scale must be finite and >= 0, got {scale}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let data = (0..rows * cols)
            .map(|_| {
                let u: f64 = rng.gen();
                if scale == 0.0 {
                    0.0
                } else {
                    scale * (2.0 * u - 1.0)
                }
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("shape is consistent")
    };
    let (d, dk) = (config.d_model, config.d_head);
    let embedding = draw(config.vocab, d);
    let layers = (0..config.layers)
        .map(|_| {
            let heads = (0..config.heads)
                .map(|_| HeadWeights {
                    w_q: draw(d, dk),
                    w_k: draw(d, dk),
                    w_v: draw(d, d),
                })
                .collect();
            LayerWeights {
                heads,
                w_a1: draw(d, d),
                w_a2: draw(d, d),
            }
        })
        .collect();
    let w_unemb = draw(d, config.vocab);
    Ok(Weights {
        config: config.clone(),
        embedding,
        layers,
        w_unemb,
    })
}

pub fn ln(x: &[f64], mode: NormMode) -> Vec<f64> {
    match mode {
        NormMode::ClipNorm => {
            let norm = dot(x, x).sqrt();
            if norm <= 1.0 {
                x.to_vec()
            } else {
                x.iter().map(|v| v / norm).collect()
            }
        }
        NormMode::Rms => {
            let ms = dot(x, x) / x.len().max(1) as f64;
            let denom = (ms + 1e-6).sqrt();
            x.iter().map(|v| v / denom).collect()
        }
    }
}

pub fn ln_rows(x: &Matrix, mode: NormMode) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&ln(x.row(i), mode));
    }
    out
}

/// Per-head query/key/value projections of normalised rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub fn project_heads(x_normed: &Matrix, layer: &LayerWeights) -> Result<Vec<HeadProjections>> {
    layer
        .heads
        .iter()
        .map(|h| {
            Ok(HeadProjections {
                q: matmul(x_normed, &h.w_q)?,
                k: matmul(x_normed, &h.w_k)?,
                v: matmul(x_normed, &h.w_v)?,
            })
        })
        .collect()
}

/// Output of the attention half of a block, with the intermediates the
/// engine caches and the per-head log-sum-exp it feeds to lazy detection.
#[derive(Debug, Clone)]
pub struct AttentionPass {
    pub mha_out: Matrix,
    pub heads: Vec<HeadProjections>,
    /// `lse[h][i]`: log of the softmax denominator of head `h`, row `i`.
    pub lse: Vec<Vec<f64>>,
}

pub fn attention_pass(
    x_normed: &Matrix,
    layer: &LayerWeights,
    mask: &MaskSpec,
    config: &ModelConfig,
) -> Result<AttentionPass> {
    if x_normed.cols() != config.d_model {
        return contract(format!(
            "attention input width {} != d_model {}",
            x_normed.cols(),
            config.d_model
        ));
    }
    let heads = project_heads(x_normed, layer)?;
    let mut mha_out = Matrix::zeros(x_normed.rows(), config.d_model);
    let mut lse = Vec::with_capacity(heads.len());
    for h in &heads {
        let (out, l) = masked_attention(&h.q, &h.k, &h.v, mask, config.logit_scale())?;
        for (o, x) in mha_out.data_mut().iter_mut().zip(out.data()) {
            *o += x;
        }
        lse.push(l);
    }
    Ok(AttentionPass { mha_out, heads, lse })
}

/// `sum_h softmax(q_h k_h^T + mask) v_h` over already-normalised rows.
pub fn mha_forward(
    x_normed: &Matrix,
    layer: &LayerWeights,
    mask: &MaskSpec,
    config: &ModelConfig,
) -> Result<Matrix> {
    Ok(attention_pass(x_normed, layer, mask, config)?.mha_out)
}

/// Row-wise `σ(x W_A1) W_A2`.
pub fn ffn_row(x: &[f64], layer: &LayerWeights, act: Activation) -> Vec<f64> {
    let hidden: Vec<f64> = vec_mat(x, &layer.w_a1).into_iter().map(|v| act.apply(v)).collect();
    vec_mat(&hidden, &layer.w_a2)
}

/// `Y + ffn(LN(Y))`, row by row.
pub fn ffn_residual(y: &Matrix, layer: &LayerWeights, config: &ModelConfig) -> Matrix {
    let mut x = y.clone();
    for i in 0..y.rows() {
        let f = ffn_row(&ln(y.row(i), config.norm), layer, config.activation);
        for (o, v) in x.row_mut(i).iter_mut().zip(f) {
            *o += v;
        }
    }
    x
}

/// One block: returns `(Y_i, X_i)`.
pub fn block_forward(
    x_prev: &Matrix,
    layer_index: usize,
    weights: &Weights,
    mask: &MaskSpec,
) -> Result<(Matrix, Matrix)> {
    let config = &weights.config;
    let Some(layer) = weights.layers.get(layer_index) else {
        return contract(format!(
            "layer {layer_index} out of range ({} layers)",
            weights.layers.len()
        ));
    };
    let pass = attention_pass(&ln_rows(x_prev, config.norm), layer, mask, config)?;
    let y = x_prev.add(&pass.mha_out)?;
    let x = ffn_residual(&y, layer, config);
    Ok((y, x))
}

/// Hidden states of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    /// `x[0]` is the embedding, `x[i]` the output of block `i`.
    pub x: Vec<Matrix>,
    /// `y[i - 1]` is the post-attention state of block `i`.
    pub y: Vec<Matrix>,
    pub logits: Matrix,
}

impl HiddenTrace {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

pub fn embed(tokens: &[u32], weights: &Weights) -> Result<Matrix> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= weights.config.vocab) {
        return input(format!(
            "token id {bad} out of range for vocabulary of {}",
            weights.config.vocab
        ));
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    Ok(weights.embedding.select_rows(&idx))
}

/// Forward pass from given input rows with one mask per layer.
pub fn forward_with_masks(x0: &Matrix, weights: &Weights, masks: &[MaskSpec]) -> Result<HiddenTrace> {
    if masks.len() != weights.layers.len() {
        return contract(format!(
            "{} masks for {} layers",
            masks.len(),
            weights.layers.len()
        ));
    }
    let mut x = vec![x0.clone()];
    let mut y = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        let (yi, xi) = block_forward(&x[i], i, weights, mask)?;
        y.push(yi);
        x.push(xi);
    }
    let logits = matmul(x.last().unwrap(), &weights.w_unemb)?;
    Ok(HiddenTrace { x, y, logits })
}

/// Embedding, every block under the causal mask, unembedding.
pub fn forward_full(tokens: &[u32], weights: &Weights) -> Result<HiddenTrace> {
    if tokens.is_empty() {
        return input("empty token sequence");
    }
    let x0 = embed(tokens, weights)?;
    let masks = vec![MaskSpec::Causal; weights.layers.len()];
    forward_with_masks(&x0, weights, &masks)
}
