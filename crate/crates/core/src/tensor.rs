//! Dense row-major tensors and the forward kernels shared by the autodiff graph.
//!
//! Everything here is deterministic: reductions run sequentially in index
//! order, and the GEMM kernel is single-threaded.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Domain {
        op,
        msg: msg.into(),
    }
}

/// Element type code used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Floating point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c = a·b (+ c)`, with `a` logically `[m×k]` and `b` logically `[k×n]`.
    /// `a_t`/`b_t` mark operands stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

fn gemm_strides(
    m: usize,
    k: usize,
    n: usize,
    a_t: bool,
    b_t: bool,
) -> (isize, isize, isize, isize) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    (rsa, csa, rsb, csb)
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa, rsb, csb) = gemm_strides(m, k, n, a_t, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every access the strides produce.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(domain(
                op,
                format!("expected rank 2, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Byte-level equality, treating `-0.0` and `0.0` as distinct.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// `[m×k] × [k×n] → [m×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// `[m×k] × [n×k]ᵀ → [m×n]`.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_bt")?;
    let (n, k2) = b.dims2("matmul_bt")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_bt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, &a.data, false, &b.data, true, &mut out, false);
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul_bt")
}

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(domain(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    if !x.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x.data[idx(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_rows_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    offset: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (rows, cols) = x.dims2("layer_norm")?;
    if scale.shape() != [cols] || offset.shape() != [cols] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: scale.shape.clone(),
        });
    }
    let n = T::of(cols as f64);
    let eps = T::of(eps);
    let mut out = vec![T::zero(); rows * cols];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mu = xr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / n;
        let rs = T::one() / (var + eps).sqrt();
        let o = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            o[j] = (xr[j] - mu) * rs * scale.data[j] + offset.data[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    let y = Tensor::new(x.shape.clone(), out)?.ensure_finite("layer_norm")?;
    Ok((y, NormStats { mean, rstd }))
}

/// Row-wise layer normalization over the last axis of a rank-2 tensor.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    offset: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_forward(x, scale, offset, eps).map(|(y, _)| y)
}

/// Mean negative log-likelihood in nats of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let nll = token_nll(logits, targets)?;
    let total = nll.iter().fold(0.0, |a, &v| a + v);
    Ok(T::of(total / nll.len() as f64))
}

/// Per-row negative log-likelihood, accumulated in f64.
pub fn token_nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<f64>> {
    let (rows, cols) = logits.dims2("cross_entropy")?;
    if targets.len() != rows || rows == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let mut out = Vec::with_capacity(rows);
    for (r, &t) in targets.iter().enumerate() {
        if t >= cols {
            return Err(domain(
                "cross_entropy",
                format!("target {t} >= vocab {cols}"),
            ));
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = row
            .iter()
            .fold(0.0, |a, v| a + (v.as_f64() - max).exp())
            .ln()
            + max;
        out.push(lse - row[t].as_f64());
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "cross_entropy",
        });
    }
    Ok(out)
}

/// Indices of the `k` largest entries, ordered by descending value.
/// Ties go to the lower index.
pub fn top_k_indices<T: Scalar>(x: &[T], k: usize) -> Result<Vec<usize>> {
    if k > x.len() {
        return Err(domain("top_k", format!("k={k} exceeds length {}", x.len())));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    Ok(idx)
}

pub fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}
