//! The operation set the model is written against.
//!
//! Layers are generic over [`Ops`], so the same forward code runs eagerly on
//! plain tensors ([`Eager`]) or records a gradient tape ([`super::Tape`]).

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::gret::{self, GateState};
use crate::swa::{self, WindowCache};

/// Computation paradigm for sequence mixers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    Parallel,
    Recurrent,
    /// Chunkwise recurrent with the given chunk size.
    Chunkwise(usize),
}

impl Paradigm {
    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::Parallel => "parallel",
            Paradigm::Recurrent => "recurrent",
            Paradigm::Chunkwise(_) => "chunkwise",
        }
    }
}

/// Head layout and position bookkeeping for a masked attention call.
///
/// Query row `i` sits at absolute position `q_start + i`, key row `j` at
/// `k_start + j`. Key `j` is visible to query `i` iff it is not in the future
/// and, when a window is set, lies within the last `window` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeometry {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub q_start: usize,
    pub k_start: usize,
    pub window: Option<usize>,
}

impl AttnGeometry {
    pub fn visible(&self, qi: usize, kj: usize) -> bool {
        let qp = self.q_start + qi;
        let kp = self.k_start + kj;
        kp <= qp && self.window.map_or(true, |c| kp + c > qp)
    }

    /// Query heads per KV head.
    pub fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn mask<T: Real>(&self, nq: usize, nk: usize) -> Tensor<T> {
        Tensor::from_fn(nq, nk, |i, j| {
            if self.visible(i, j) {
                T::zero()
            } else {
                T::neg_infinity()
            }
        })
    }

    pub(crate) fn check(&self, q_cols: usize, kv_cols: usize) -> Result<()> {
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} query heads cannot be grouped over {} kv heads",
                self.n_heads, self.n_kv_heads
            )));
        }
        if q_cols != self.n_heads * self.d_head || kv_cols != self.n_kv_heads * self.d_head {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![q_cols],
                rhs: vec![kv_cols],
            });
        }
        Ok(())
    }
}

pub trait Ops<T: Real> {
    /// Handle to a value in this computation.
    type V: Clone;

    /// Wraps a tensor as a constant (never differentiated).
    fn input(&mut self, t: &Tensor<T>) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;
    /// Identity of the storage behind a handle.
    fn id(&self, v: &Self::V) -> usize;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul_t(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, s: T) -> Result<Self::V>;
    fn sigmoid(&mut self, a: &Self::V) -> Result<Self::V>;
    fn logsigmoid(&mut self, a: &Self::V) -> Result<Self::V>;
    fn exp(&mut self, a: &Self::V) -> Result<Self::V>;
    fn swish(&mut self, a: &Self::V) -> Result<Self::V>;
    fn cumsum_rows(&mut self, a: &Self::V) -> Result<Self::V>;
    fn decay_matrix(&mut self, c: &Self::V) -> Result<Self::V>;
    fn softmax_masked(&mut self, logits: &Self::V, mask: &Tensor<T>) -> Result<Self::V>;
    fn rmsnorm(&mut self, x: &Self::V, gain: &Self::V, eps: T) -> Result<Self::V>;
    fn standardize_rows(&mut self, x: &Self::V, eps: T) -> Result<Self::V>;
    fn slice_cols(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn slice_rows(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn rotate_pairs(&mut self, x: &Self::V, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<Self::V>;
    fn gather_rows(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Result<Self::V>;

    /// Single-head gated retention over `q,k: n×d_k`, `v: n×d_v` with the
    /// per-position log-decays in the `n×1` column `log_gamma`. Returns the
    /// output and the state after the last position.
    fn gated_retention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        log_gamma: &Self::V,
        paradigm: Paradigm,
        init: Option<&GateState<T>>,
    ) -> Result<(Self::V, GateState<T>)>;

    /// Multi-head masked softmax attention, logits scaled by `d_head^-1/2`.
    fn attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        geom: &AttnGeometry,
    ) -> Result<Self::V> {
        default_attention(self, q, k, v, geom)
    }

    /// Windowed self-attention over new rows `q,k,v`, continuing from the rows
    /// held in `cache` (if any). The cache is advanced past the new rows.
    fn window_attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        geom: &AttnGeometry,
        cache: Option<&mut WindowCache<T>>,
        paradigm: Paradigm,
    ) -> Result<Self::V>;
}

/// Attention composed from primitive ops; used by the tape.
pub(crate) fn default_attention<T: Real, O: Ops<T> + ?Sized>(
    ops: &mut O,
    q: &O::V,
    k: &O::V,
    v: &O::V,
    geom: &AttnGeometry,
) -> Result<O::V> {
    let (nq, qc) = ops.value(q).dims2()?;
    let (nk, kc) = ops.value(k).dims2()?;
    geom.check(qc, kc)?;
    let mask = geom.mask::<T>(nq, nk);
    let scale = T::one() / T::of(geom.d_head as f64).sqrt();
    let dh = geom.d_head;
    let mut heads = Vec::with_capacity(geom.n_heads);
    for h in 0..geom.n_heads {
        let kvh = h / geom.group();
        let qh = ops.slice_cols(q, h * dh, dh)?;
        let kh = ops.slice_cols(k, kvh * dh, dh)?;
        let vh = ops.slice_cols(v, kvh * dh, dh)?;
        let scores = ops.matmul_t(&qh, &kh)?;
        let scores = ops.scale(&scores, scale)?;
        let probs = ops.softmax_masked(&scores, &mask)?;
        heads.push(ops.matmul(&probs, &vh)?);
    }
    ops.concat_cols(&heads)
}

/// Plain evaluation on tensors; no gradient bookkeeping.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Real> Ops<T> for Eager {
    type V = Tensor<T>;

    fn input(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn id(&self, v: &Tensor<T>) -> usize {
        v.buffer_id()
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.matmul(b)
    }

    fn matmul_t(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.matmul_t(b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }

    fn hadamard(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.hadamard(b)
    }

    fn scale(&mut self, a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        Ok(a.scale(s))
    }

    fn sigmoid(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.sigmoid())
    }

    fn logsigmoid(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.logsigmoid())
    }

    fn exp(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        a.exp().ensure_finite("exp")
    }

    fn swish(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.swish())
    }

    fn cumsum_rows(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        a.cumsum(0)
    }

    fn decay_matrix(&mut self, c: &Tensor<T>) -> Result<Tensor<T>> {
        c.decay_matrix()
    }

    fn softmax_masked(&mut self, logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        logits.softmax_masked(mask)
    }

    fn rmsnorm(&mut self, x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        x.rmsnorm(gain, eps)
    }

    fn standardize_rows(&mut self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        x.standardize_rows(eps)
    }

    fn slice_cols(&mut self, a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        a.slice_cols(start, len)
    }

    fn slice_rows(&mut self, a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        a.slice_rows(start, len)
    }

    fn concat_cols(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        Tensor::concat_cols(parts)
    }

    fn concat_rows(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        Tensor::concat_rows(parts)
    }

    fn rotate_pairs(&mut self, x: &Tensor<T>, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<Tensor<T>> {
        x.rotate_pairs(cos, sin)
    }

    fn gather_rows(&mut self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        table.gather_rows(ids)
    }

    fn sum(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(a.sum()))
    }

    fn gated_retention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        log_gamma: &Tensor<T>,
        paradigm: Paradigm,
        init: Option<&GateState<T>>,
    ) -> Result<(Tensor<T>, GateState<T>)> {
        gret::retention(q, k, v, log_gamma.data(), paradigm, init)
    }

    fn attention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        geom: &AttnGeometry,
    ) -> Result<Tensor<T>> {
        swa::attend(q, k, v, geom)
    }

    fn window_attention(
        &mut self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        geom: &AttnGeometry,
        cache: Option<&mut WindowCache<T>>,
        paradigm: Paradigm,
    ) -> Result<Tensor<T>> {
        swa::window_attention(q, k, v, geom, cache, paradigm)
    }
}
