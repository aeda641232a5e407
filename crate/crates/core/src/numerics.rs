//! Dense row-major matrices and the masked softmax / log-sum-exp kernels
//! that every other module builds on.
//!
//! All arithmetic is `f64`. Masked positions are never written as `-inf`;
//! they are skipped entirely, so the max-subtraction pass only ever sees
//! finite scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return contract(format!("row {i} has width {} (expected {cols})", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return contract(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row vector times matrix: `x · m`.
pub fn vec_mat(x: &[f64], m: &Matrix) -> Vec<f64> {
    debug_assert_eq!(x.len(), m.rows());
    let mut out = vec![0.0; m.cols()];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += xk * w;
        }
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return contract(format!(
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(out);
    }
    let work = a.rows * a.cols * b.cols;
    let fill = |(i, out_row): (usize, &mut [f64])| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    };
    if work > PARALLEL_WORK_THRESHOLD {
        out.data.par_chunks_mut(b.cols).enumerate().for_each(fill);
    } else {
        out.data.chunks_mut(b.cols).enumerate().for_each(fill);
    }
    Ok(out)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Max over rows of the row's l2 norm (the `l_{2,inf}` norm).
pub fn row_2inf_norm(m: &Matrix) -> f64 {
    m.iter_rows()
        .map(|r| dot(r, r).sqrt())
        .fold(0.0, f64::max)
}

pub(crate) const PARALLEL_WORK_THRESHOLD: usize = 1 << 18;

/// Which key positions each query row may attend to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSpec {
    /// Row `i` sees every `j <= i`.
    Causal,
    /// Row `i` sees exactly `allowed[i]`, an ascending subset of `0..=i`.
    LazySet(Vec<Vec<usize>>),
}

/// Allowed key positions of a single row.
#[derive(Debug, Clone, Copy)]
pub enum Allowed<'a> {
    Prefix(usize),
    Set(&'a [usize]),
}

impl<'a> Allowed<'a> {
    pub fn len(&self) -> usize {
        match self {
            Allowed::Prefix(n) => *n,
            Allowed::Set(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + Clone + 'a {
        let (prefix, set) = match *self {
            Allowed::Prefix(n) => (0..n, &[][..]),
            Allowed::Set(s) => (0..0, s),
        };
        prefix.chain(set.iter().copied())
    }
}

impl MaskSpec {
    pub fn allowed(&self, row: usize) -> Allowed<'_> {
        match self {
            MaskSpec::Causal => Allowed::Prefix(row + 1),
            MaskSpec::LazySet(sets) => Allowed::Set(&sets[row]),
        }
    }

    /// Checks the mask against an `rows x cols` score matrix.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        match self {
            MaskSpec::Causal => {
                if rows > cols {
                    return contract(format!("causal mask needs cols >= rows ({rows}x{cols})"));
                }
            }
            MaskSpec::LazySet(sets) => {
                if sets.len() != rows {
                    return contract(format!("mask has {} rows, scores have {rows}", sets.len()));
                }
                for (i, set) in sets.iter().enumerate() {
                    if set.is_empty() {
                        return contract(format!("row {i} has an empty allowed set"));
                    }
                    if set.windows(2).any(|w| w[0] >= w[1]) {
                        return contract(format!("row {i} allowed set is not strictly ascending"));
                    }
                    let last = *set.last().unwrap();
                    if last > i || last >= cols {
                        return contract(format!("row {i} allows position {last} beyond causal range"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Allowed sets spelled out explicitly; `Causal` becomes `{0..=i}` per row.
    pub fn to_sets(&self, rows: usize) -> Vec<Vec<usize>> {
        (0..rows).map(|i| self.allowed(i).iter().collect()).collect()
    }
}

/// Softmax weights of `scores` restricted to `allowed`, written in the order
/// of `allowed`. Returns the log-sum-exp of the allowed scores as well.
pub(crate) fn allowed_softmax(scores: &[f64], weights: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (w, &s) in weights.iter_mut().zip(scores) {
        *w = (s - max).exp();
        sum += *w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    max + sum.ln()
}

/// Numerically stable `log(sum(exp(values)))`. Returns `-inf` for an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Plain softmax of a whole vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    if !values.is_empty() {
        allowed_softmax(values, &mut out);
    }
    out
}

pub fn masked_row_softmax(scores: &Matrix, mask: &MaskSpec) -> Result<Matrix> {
    mask.validate(scores.rows, scores.cols)?;
    let mut out = Matrix::zeros(scores.rows, scores.cols);
    let mut picked = Vec::new();
    let mut weights = Vec::new();
    for i in 0..scores.rows {
        let allowed = mask.allowed(i);
        let row = scores.row(i);
        picked.clear();
        picked.extend(allowed.iter().map(|j| row[j]));
        weights.resize(picked.len(), 0.0);
        allowed_softmax(&picked, &mut weights);
        let out_row = out.row_mut(i);
        for (j, w) in allowed.iter().zip(&weights) {
            out_row[j] = *w;
        }
    }
    Ok(out)
}

pub fn masked_row_logsumexp(scores: &Matrix, mask: &MaskSpec) -> Result<Vec<f64>> {
    mask.validate(scores.rows, scores.cols)?;
    let mut picked = Vec::new();
    Ok((0..scores.rows)
        .map(|i| {
            let row = scores.row(i);
            picked.clear();
            picked.extend(mask.allowed(i).iter().map(|j| row[j]));
            logsumexp(&picked)
        })
        .collect())
}

/// Single-head masked attention computed row by row without materialising
/// the score matrix: `softmax(scale * q k^T + mask) v`.
///
/// Returns the output rows and, per query row, the log-sum-exp of the
/// allowed scaled scores (the softmax denominator in log space).
pub fn masked_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &MaskSpec,
    scale: f64,
) -> Result<(Matrix, Vec<f64>)> {
    if q.cols != k.cols {
        return contract(format!("query width {} != key width {}", q.cols, k.cols));
    }
    if k.rows != v.rows {
        return contract(format!("{} keys but {} values", k.rows, v.rows));
    }
    if v.cols == 0 {
        return contract("values must have at least one column");
    }
    mask.validate(q.rows, k.rows)?;
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut lse = vec![0.0; q.rows];
    let row_job = |(i, (out_row, lse_i)): (usize, (&mut [f64], &mut f64))| {
        let allowed = mask.allowed(i);
        *lse_i = attend_row(q.row(i), allowed.iter(), allowed.len(), k, v, scale, out_row);
    };
    let work = q.rows * k.rows * (k.cols + v.cols);
    if work > PARALLEL_WORK_THRESHOLD {
        out.data
            .par_chunks_mut(v.cols)
            .zip(lse.par_iter_mut())
            .enumerate()
            .for_each(row_job);
    } else {
        out.data
            .chunks_mut(v.cols)
            .zip(lse.iter_mut())
            .enumerate()
            .for_each(row_job);
    }
    Ok((out, lse))
}

/// Attention of one query over the keys/values at `positions`; accumulates
/// into `out` (which the caller zeroes) and returns the log-sum-exp.
pub(crate) fn attend_row(
    query: &[f64],
    positions: impl Iterator<Item = usize> + Clone,
    count: usize,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    out: &mut [f64],
) -> f64 {
    let scores: Vec<f64> = positions
        .clone()
        .map(|j| dot(query, k.row(j)) * scale)
        .collect();
    debug_assert_eq!(scores.len(), count);
    let mut weights = vec![0.0; count];
    let lse = allowed_softmax(&scores, &mut weights);
    for (j, w) in positions.zip(&weights) {
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o += w * x;
        }
    }
    lse
}
