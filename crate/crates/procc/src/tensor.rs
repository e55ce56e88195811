//! Dense 2-D tensors and the elementary numeric kernels built on them.
//!
//! Everything is 64-bit: gradient checks at 1e-4 relative tolerance are not
//! reliable in single precision. Public constructors and kernels reject
//! non-finite values so NaN/Inf never propagate silently.

use thiserror::Error;

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },
    #[error("conv kernel length {len} is even; same-padding requires an odd kernel")]
    EvenKernel { len: usize },
    #[error("conv kernel length {kernel} exceeds input length {input}")]
    KernelTooLong { kernel: usize, input: usize },
    #[error("label {label} out of range for {classes} classes at masked row {row}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("probability row {row} sums to {sum}, expected 1 within 1e-6")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("backward called before any forward pass was recorded")]
    BackwardBeforeForward,
    #[error("loss node is {0:?}, expected a 1x1 scalar")]
    NonScalarLoss((usize, usize)),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}

/// Dense row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from row-major data, rejecting length mismatches and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(KernelError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, KernelError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(KernelError::ShapeMismatch {
                    op: "from_rows",
                    left: (n, m),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(n, m, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self, KernelError> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, the comparison used by parameter-scoping contracts.
    pub fn bits_eq(&self, other: &Tensor2) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

/// Standard matrix product. Requires `a.cols == b.rows`.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2, KernelError> {
    if a.cols != b.rows {
        return Err(KernelError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let out = matmul_unchecked(a, b);
    if !out.all_finite() {
        return Err(KernelError::NonFinite { op: "matmul" });
    }
    Ok(out)
}

pub(crate) fn matmul_unchecked(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor2::from_vec_unchecked(n, m, out)
}

/// Softmax along the given axis, computed with max-subtraction so large
/// logits cannot overflow.
pub fn softmax(logits: &Tensor2, axis: Axis) -> Result<Tensor2, KernelError> {
    if !logits.all_finite() {
        return Err(KernelError::NonFinite { op: "softmax" });
    }
    match axis {
        Axis::Row => Ok(softmax_rows_unchecked(logits)),
        Axis::Col => Ok(softmax_rows_unchecked(&logits.transpose()).transpose()),
    }
}

pub(crate) fn softmax_rows_unchecked(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| v.max(0.0))
}

/// 1-d cross-correlation with zero padding so the output has the same length
/// as the input. The kernel length must be odd so the padding is symmetric.
pub fn conv1d_same(x: &[f64], kernel: &[f64]) -> Result<Vec<f64>, KernelError> {
    if x.is_empty() {
        return Err(KernelError::EmptyInput { op: "conv1d_same" });
    }
    if kernel.is_empty() {
        return Err(KernelError::EmptyInput { op: "conv1d_same kernel" });
    }
    if kernel.len() % 2 == 0 {
        return Err(KernelError::EvenKernel { len: kernel.len() });
    }
    if kernel.len() > x.len() {
        return Err(KernelError::KernelTooLong {
            kernel: kernel.len(),
            input: x.len(),
        });
    }
    Ok(conv1d_same_unchecked(x, kernel))
}

pub(crate) fn conv1d_same_unchecked(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = kernel.len() / 2;
    let n = x.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (t, &kv) in kernel.iter().enumerate() {
            let j = i as isize + t as isize - half as isize;
            if j >= 0 && (j as usize) < n {
                acc += kv * x[j as usize];
            }
        }
        *o = acc;
    }
    out
}

/// Mean negative log-likelihood over the masked rows of a probability table.
///
/// Probabilities are clamped at [`PROB_CLAMP`] before the logarithm so the
/// loss stays finite on degenerate predictions. An all-false mask yields 0.
pub fn cross_entropy(probs: &Tensor2, labels: &[usize], mask: &[bool]) -> Result<f64, KernelError> {
    if labels.len() != probs.rows() || mask.len() != probs.rows() {
        return Err(KernelError::ShapeMismatch {
            op: "cross_entropy",
            left: probs.shape(),
            right: (labels.len(), mask.len()),
        });
    }
    for r in 0..probs.rows() {
        let sum: f64 = probs.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(KernelError::RowNotNormalized { row: r, sum });
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..probs.rows() {
        if !mask[r] {
            continue;
        }
        if labels[r] >= probs.cols() {
            return Err(KernelError::LabelOutOfRange {
                row: r,
                label: labels[r],
                classes: probs.cols(),
            });
        }
        total += -(probs.get(r, labels[r]).max(PROB_CLAMP)).ln();
        count += 1;
    }
    if count == 0 {
        Ok(0.0)
    } else {
        Ok(total / count as f64)
    }
}
