//! Dense double-precision linear algebra and the elementwise operations the
//! transformer is built from.
//!
//! Activations follow the column convention: a `d × c` matrix holds one
//! embedding per column, so a prompted layer input is `d_t × (K + n)` with the
//! prompt columns first. Storage is row-major. Every reduction runs in a fixed
//! index order so that results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{MopsError, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
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
            return Err(MopsError::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// A single column vector.
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Matrix {
        let w = end - start;
        let mut out = Matrix::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn check_dims(op: &str, ok: bool, a: &Matrix, b: &Matrix) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(MopsError::Shape(format!("{op}: incompatible shapes {}x{} and {}x{}", a.rows, a.cols, b.rows, b.cols)))
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dims("matmul", a.cols == b.rows, a, b)?;
    Ok(matmul_unchecked(a, b))
}

pub(crate) fn matmul_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Matrix { rows: n, cols: m, data: out }
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dims("matmul_tn", a.rows == b.rows, a, b)?;
    Ok(matmul_tn_unchecked(a, b))
}

pub(crate) fn matmul_tn_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let (k, n, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Matrix { rows: n, cols: m, data: out }
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dims("matmul_nt", a.cols == b.cols, a, b)?;
    Ok(matmul_nt_unchecked(a, b))
}

pub(crate) fn matmul_nt_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = dot(arow, brow);
        }
    }
    Matrix { rows: n, cols: m, data: out }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention visibility pattern over `K` prompt positions followed by `n`
/// token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    allowed: Vec<bool>,
}

impl Mask {
    /// Every entry allowed.
    pub fn open(size: usize) -> Self {
        Self { size, allowed: vec![true; size * size] }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(f(i, j));
            }
        }
        Self { size, allowed }
    }

    /// The extended decoder mask: rows are query positions, columns key
    /// positions. Prompt columns are visible to every row, tokens see
    /// earlier-or-equal tokens, and prompt rows see only prompts.
    pub fn extended(n: usize, prompts: usize) -> Self {
        Self::from_fn(prompts + n, |i, j| j < prompts || (i >= prompts && j <= i))
    }

    pub fn causal(n: usize) -> Self {
        Self::extended(n, 0)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }
}

/// Row-wise softmax of `logits` restricted to the entries `mask` allows.
///
/// Row `i` is the distribution of query `i` over keys. Blocked entries are
/// treated as `-inf` logits and come out exactly zero.
pub fn masked_softmax_rows(logits: &Matrix, mask: &Mask) -> Result<Matrix> {
    if logits.rows != mask.size || logits.cols != mask.size {
        return Err(MopsError::Shape(format!(
            "softmax: logits {}x{} against a mask of size {}",
            logits.rows, logits.cols, mask.size
        )));
    }
    let n = mask.size;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if mask.allows(i, j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(MopsError::Numerical(format!("softmax row {i} has no allowed entries")));
        }
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for (j, o) in orow.iter_mut().enumerate() {
            if mask.allows(i, j) {
                let e = (row[j] - max).exp();
                *o = e;
                sum += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Plain softmax of a vector.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// Column-wise concatenation `[a | b]`.
pub fn concat_columns(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(MopsError::Shape(format!("concat: row counts differ ({} vs {})", a.rows, b.rows)));
    }
    let cols = a.cols + b.cols;
    let mut out = Matrix::zeros(a.rows, cols);
    for r in 0..a.rows {
        let orow = out.row_mut(r);
        orow[..a.cols].copy_from_slice(a.row(r));
        orow[a.cols..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

/// Splits `m` into its first `at` columns and the rest.
pub fn split_columns(m: &Matrix, at: usize) -> (Matrix, Matrix) {
    (m.col_block(0, at), m.col_block(at, m.cols))
}

/// Arithmetic mean over all columns.
pub fn mean_columns(m: &Matrix) -> Result<Vec<f64>> {
    if m.cols == 0 {
        return Err(MopsError::Shape("mean of a matrix with no columns".into()));
    }
    Ok(mean_of_columns(m, 0, m.cols))
}

/// Mean of columns `start..end`.
pub(crate) fn mean_of_columns(m: &Matrix, start: usize, end: usize) -> Vec<f64> {
    let count = (end - start) as f64;
    (0..m.rows).map(|r| m.row(r)[start..end].iter().sum::<f64>() / count).collect()
}

/// Central-difference gradient of `f` with respect to every entry of
/// `params`.
pub fn finite_difference_gradient<F>(mut f: F, params: &Matrix, epsilon: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    finite_difference_entries(&mut f, params, epsilon, 0..params.data.len()).map(|entries| {
        let mut grad = Matrix::zeros(params.rows, params.cols);
        for (idx, g) in entries {
            grad.data[idx] = g;
        }
        grad
    })
}

/// Central differences at a chosen subset of flat indices. Returns
/// `(index, derivative)` pairs in the order given.
pub fn finite_difference_entries<F, I>(
    f: &mut F,
    params: &Matrix,
    epsilon: f64,
    indices: I,
) -> Result<Vec<(usize, f64)>>
where
    F: FnMut(&Matrix) -> f64,
    I: IntoIterator<Item = usize>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(MopsError::Config(format!("finite-difference epsilon must be > 0, got {epsilon}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::new();
    for idx in indices {
        let orig = probe.data[idx];
        probe.data[idx] = orig + epsilon;
        let plus = f(&probe);
        probe.data[idx] = orig - epsilon;
        let minus = f(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(MopsError::Numerical(format!("objective not finite while probing entry {idx}")));
        }
        out.push((idx, (plus - minus) / (2.0 * epsilon)));
    }
    Ok(out)
}

/// Symmetric relative error with an absolute floor, the metric used by the
/// gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Independent child seed for stream `tag` of `base` (splitmix64 finaliser).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
