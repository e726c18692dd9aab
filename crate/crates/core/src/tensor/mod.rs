//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Storage is contiguous and reference counted, so cloning a tensor is cheap and
//! a tensor can be shared read-only across threads. There are no strided views.

mod ops;
mod tape;

pub use ops::{AttnGeometry, Eager, Ops, Paradigm};
pub use tape::{grad_check, GradCheckReport, Grads, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (runtime default) and
/// `f64` (oracle precision).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

/// Dense tensor with a shape and row-major data.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} elements", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a 2-D tensor; panics if the data length does not match.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "data length must be rows*cols");
        Self {
            shape: vec![rows, cols],
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel(shape)]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_rows(rows, cols, data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a 2-D tensor".into(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            numel(&self.shape[..self.shape.len() - 1])
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::of(x.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Address of the backing buffer; equal for tensors that share storage.
    pub fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as *const () as usize
    }

    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(self, ctx: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(ctx))
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs().as_f64()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn logsigmoid(&self) -> Self {
        self.map(logsigmoid)
    }

    pub fn exp(&self) -> Self {
        self.map(|x| x.exp())
    }

    pub fn swish(&self) -> Self {
        self.map(|x| x * sigmoid(x))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self::from_rows(m, n, out))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&self, b: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(a_row, &b.data[j * k..(j + 1) * k]));
            }
        }
        Ok(Self::from_rows(m, n, out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn(c, r, |i, j| self.data[j * c + i]))
    }

    /// Cumulative sum of a 2-D tensor along `axis` (0 = down rows, 1 = along a row).
    pub fn cumsum(&self, axis: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = self.data.to_vec();
        match axis {
            0 => {
                for i in 1..r {
                    for j in 0..c {
                        let prev = out[(i - 1) * c + j];
                        out[i * c + j] += prev;
                    }
                }
            }
            1 => {
                for i in 0..r {
                    for j in 1..c {
                        let prev = out[i * c + j - 1];
                        out[i * c + j] += prev;
                    }
                }
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "cumsum axis {axis} on a 2-D tensor"
                )))
            }
        }
        Ok(Self::from_rows(r, c, out))
    }

    /// Reverse cumulative sum along axis 0 (suffix sums); the adjoint of `cumsum(0)`.
    pub fn rev_cumsum_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = self.data.to_vec();
        for i in (0..r.saturating_sub(1)).rev() {
            for j in 0..c {
                let next = out[(i + 1) * c + j];
                out[i * c + j] += next;
            }
        }
        Ok(Self::from_rows(r, c, out))
    }

    /// Lower-triangular decay matrix from a column of cumulative log-decays:
    /// `D[i][j] = exp(c[i] - c[j])` for `j <= i`, zero above the diagonal.
    pub fn decay_matrix(&self) -> Result<Self> {
        let (n, one) = self.dims2()?;
        if one != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "decay_matrix expects an n×1 column".into(),
            });
        }
        let c = &self.data;
        Ok(Self::from_fn(n, n, |i, j| {
            if j <= i {
                (c[i] - c[j]).exp()
            } else {
                T::zero()
            }
        }))
    }

    /// Row-wise softmax of `self + mask`. Mask entries are `0` or `-inf`.
    pub fn softmax_masked(&self, mask: &Self) -> Result<Self> {
        self.same_shape(mask, "softmax_masked")?;
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let logits = &self.data[i * c..(i + 1) * c];
            let m = &mask.data[i * c..(i + 1) * c];
            let row_max = logits
                .iter()
                .zip(m)
                .filter(|(_, &mv)| mv != T::neg_infinity())
                .fold(T::neg_infinity(), |acc, (&l, &mv)| acc.max(l + mv));
            if row_max == T::neg_infinity() {
                return Err(Error::FullyMasked(i));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = T::zero();
            for j in 0..c {
                if m[j] != T::neg_infinity() {
                    let e = (logits[j] + m[j] - row_max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            for x in o.iter_mut() {
                *x = *x / total;
            }
        }
        Ok(Self::from_rows(r, c, out))
    }

    /// RMS normalization over the last axis followed by a per-dimension gain.
    pub fn rmsnorm(&self, gain: &Self, eps: T) -> Result<Self> {
        let d = self.cols();
        if gain.len() != d || d == 0 {
            return Err(Error::Shape {
                op: "rmsnorm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(self.len());
        let inv_d = T::one() / T::of(d as f64);
        for row in self.data.chunks(d) {
            let ms = row.iter().map(|&x| x * x).sum::<T>() * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            out.extend(row.iter().zip(gain.data.iter()).map(|(&x, &g)| {
                if x == T::zero() {
                    T::zero()
                } else {
                    x * inv * g
                }
            }));
        }
        Self::new(self.shape.clone(), out)
    }

    /// Per-row standardization to zero mean and unit variance (no affine).
    pub fn standardize_rows(&self, eps: T) -> Result<Self> {
        let d = self.cols();
        let inv_d = T::one() / T::of(d as f64);
        let mut out = Vec::with_capacity(self.len());
        for row in self.data.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
            let inv = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&x| (x - mean) * inv));
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} of {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Self::from_rows(r, len, out))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            return Err(Error::InvalidArgument(format!(
                "row slice {start}..{} of {r} rows",
                start + len
            )));
        }
        Ok(Self::from_rows(
            len,
            c,
            self.data[start * c..(start + len) * c].to_vec(),
        ))
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let r = parts.first().map(|p| p.rows()).unwrap_or(0);
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_rows(r, total, out))
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let c = parts.first().map(|p| p.cols()).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            out.extend_from_slice(&p.data);
            rows += pr;
        }
        Ok(Self::from_rows(rows, c, out))
    }

    /// Rotates interleaved pairs `(x[2j], x[2j+1])` of every row by the angle
    /// whose cosine/sine are `cos[i][j]`, `sin[i][j]`.
    pub fn rotate_pairs(&self, cos: &Self, sin: &Self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if c % 2 != 0 || cos.shape() != [r, c / 2] || sin.shape() != [r, c / 2] {
            return Err(Error::Shape {
                op: "rotate_pairs",
                lhs: self.shape.clone(),
                rhs: cos.shape.clone(),
            });
        }
        let half = c / 2;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.row(i);
            for j in 0..half {
                let (co, si) = (cos.data[i * half + j], sin.data[i * half + j]);
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                out.push(a * co - b * si);
                out.push(a * si + b * co);
            }
        }
        Ok(Self::from_rows(r, c, out))
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::TokenOutOfVocab { token: id, vocab: r });
            }
            out.extend_from_slice(self.row(id));
        }
        Ok(Self::from_rows(ids.len(), c, out))
    }

    /// Appends rows in place. Copies only if the storage is shared.
    pub(crate) fn append_rows(&mut self, rows: &[T], reserve_rows: usize) {
        let c = self.cols();
        debug_assert_eq!(rows.len() % c, 0);
        let buf = Arc::make_mut(&mut self.data);
        if buf.capacity() < buf.len() + rows.len() {
            buf.reserve_exact(reserve_rows * c - buf.len());
        }
        buf.extend_from_slice(rows);
        let n = buf.len() / c;
        self.shape = vec![n, c];
    }

    pub(crate) fn capacity_rows(&self) -> usize {
        self.data.capacity() / self.cols().max(1)
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))` computed without overflow for large `|x|`.
pub fn logsigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
