//! On-disk model format.
//!
//! A single line of compact JSON (the header) terminated by `\n`, followed by
//! a raw blob of little-endian `f64` values. Matrices are stored row-major in
//! this order: embedding, then for each layer every head's `W_Q, W_K, W_V`
//! followed by the layer's `W_A1, W_A2`, and finally `W_unemb`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input, Result};
use crate::model::{ModelConfig, Weights};
use crate::numerics::Matrix;

pub const FORMAT_NAME: &str = "lazykv-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub scale: f64,
    pub byte_order: String,
    pub dtype: String,
    pub blob_len: usize,
}

/// A model read back from disk together with its identity.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub header: ModelHeader,
    pub weights: Weights,
    /// Hex SHA-256 of the file bytes.
    pub fingerprint: String,
}

fn matrix_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
    let (d, dk) = (config.d_model, config.d_head);
    let mut shapes = vec![(config.vocab, d)];
    for _ in 0..config.layers {
        for _ in 0..config.heads {
            shapes.extend([(d, dk), (d, dk), (d, d)]);
        }
        shapes.extend([(d, d), (d, d)]);
    }
    shapes.push((d, config.vocab));
    shapes
}

pub fn expected_blob_len(config: &ModelConfig) -> usize {
    matrix_shapes(config).iter().map(|(r, c)| r * c * 8).sum()
}

pub fn to_bytes(weights: &Weights, seed: u64, scale: f64) -> Result<Vec<u8>> {
    let header = ModelHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: weights.config.clone(),
        seed,
        scale,
        byte_order: "little-endian".into(),
        dtype: "f64".into(),
        blob_len: expected_blob_len(&weights.config),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for m in weights.matrices() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<LoadedModel> {
    let Some(split) = bytes.iter().position(|&b| b == b'\n') else {
        return input("model file has no header line");
    };
    let header: ModelHeader = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return input(format!(
            "unsupported model format {} v{}",
            header.format, header.version
        ));
    }
    if header.byte_order != "little-endian" || header.dtype != "f64" {
        return input(format!(
            "unsupported encoding {} / {}",
            header.byte_order, header.dtype
        ));
    }
    header.config.validate()?;
    let blob = &bytes[split + 1..];
    let expected = expected_blob_len(&header.config);
    if header.blob_len != expected || blob.len() != expected {
        return input(format!(
            "model blob is {} bytes (header says {}), config requires {expected}",
            blob.len(),
            header.blob_len
        ));
    }

    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let mut matrices = Vec::new();
    for (rows, cols) in matrix_shapes(&header.config) {
        let data: Vec<f64> = values.by_ref().take(rows * cols).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return input("model contains non-finite weights");
        }
        matrices.push(Matrix::from_vec(rows, cols, data)?);
    }
    let mut weights = Weights::zeros(&header.config)?;
    for (slot, m) in weights.matrices_mut().into_iter().zip(matrices) {
        *slot = m;
    }
    Ok(LoadedModel {
        fingerprint: fingerprint(bytes),
        header,
        weights,
    })
}

pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(path: &Path, weights: &Weights, seed: u64, scale: f64) -> Result<String> {
    let bytes = to_bytes(weights, seed, scale)?;
    fs::write(path, &bytes)?;
    Ok(fingerprint(&bytes))
}

pub fn load(path: &Path) -> Result<LoadedModel> {
    from_bytes(&fs::read(path)?)
}
