//! Sliding-window attention and its constant-size decode cache.
//!
//! A query at position `i` sees keys at positions `j` with `i - C < j <= i`:
//! itself plus the `C - 1` positions before it.

use crate::error::{Error, Result};
use crate::model::rope::RotaryTables;
use crate::tensor::{dot, AttnGeometry, Eager, Ops, Paradigm, Real, Tensor};

/// Ring buffer holding the keys and values of the last `capacity` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowCache<T> {
    capacity: usize,
    width: usize,
    k: Vec<T>,
    v: Vec<T>,
    /// Number of live rows, `<= capacity`.
    len: usize,
    /// Slot the next row is written to.
    head: usize,
    /// Positions seen so far.
    position: usize,
}

impl<T: Real> WindowCache<T> {
    /// Preallocates `capacity` rows of width `width` for keys and values.
    pub fn new(capacity: usize, width: usize) -> Self {
        assert!(capacity >= 1, "window must hold at least one position");
        Self {
            capacity,
            width,
            k: vec![T::zero(); capacity * width],
            v: vec![T::zero(); capacity * width],
            len: 0,
            head: 0,
            position: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Values held by the preallocated buffers (keys and values).
    pub fn state_values(&self) -> usize {
        2 * self.capacity * self.width
    }

    pub fn push(&mut self, k: &[T], v: &[T]) -> Result<()> {
        if k.len() != self.width || v.len() != self.width {
            return Err(Error::Shape {
                op: "window cache push",
                lhs: vec![k.len(), v.len()],
                rhs: vec![self.width],
            });
        }
        let at = self.head * self.width;
        self.k[at..at + self.width].copy_from_slice(k);
        self.v[at..at + self.width].copy_from_slice(v);
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        self.position += 1;
        Ok(())
    }

    pub fn push_rows(&mut self, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        for i in 0..k.rows() {
            self.push(k.row(i), v.row(i))?;
        }
        Ok(())
    }

    fn slot(&self, i: usize) -> usize {
        // oldest live row is at head - len (mod capacity)
        (self.head + self.capacity - self.len + i) % self.capacity
    }

    /// Live rows oldest first.
    pub fn ordered(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut k = Vec::with_capacity(self.len * self.width);
        let mut v = Vec::with_capacity(self.len * self.width);
        for i in 0..self.len {
            let s = self.slot(i) * self.width;
            k.extend_from_slice(&self.k[s..s + self.width]);
            v.extend_from_slice(&self.v[s..s + self.width]);
        }
        Ok((
            Tensor::from_rows(self.len, self.width, k),
            Tensor::from_rows(self.len, self.width, v),
        ))
    }
}

/// Masked multi-head attention with grouped KV heads.
///
/// `q: nq × (n_heads·d_head)`, `k, v: nk × (n_kv_heads·d_head)`. Query head
/// `h` reads KV head `h / (n_heads / n_kv_heads)`. Logits are scaled by
/// `d_head^-1/2`; softmax subtracts the row maximum.
pub fn attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    geom: &AttnGeometry,
) -> Result<Tensor<T>> {
    let (nq, qc) = q.dims2()?;
    let (nk, kc) = k.dims2()?;
    if v.shape() != k.shape() {
        return Err(Error::Shape {
            op: "attend",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    geom.check(qc, kc)?;
    let dh = geom.d_head;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); nq * qc];
    let mut weights = vec![T::zero(); nk];
    for i in 0..nq {
        let visible: Vec<usize> = (0..nk).filter(|&j| geom.visible(i, j)).collect();
        if visible.is_empty() {
            return Err(Error::FullyMasked(i));
        }
        for h in 0..geom.n_heads {
            let kvh = h / geom.group();
            let qh = &q.row(i)[h * dh..(h + 1) * dh];
            let mut max = T::neg_infinity();
            for &j in &visible {
                let s = dot(qh, &k.row(j)[kvh * dh..(kvh + 1) * dh]) * scale;
                weights[j] = s;
                max = max.max(s);
            }
            let mut total = T::zero();
            for &j in &visible {
                weights[j] = (weights[j] - max).exp();
                total += weights[j];
            }
            let o = &mut out[i * qc + h * dh..i * qc + (h + 1) * dh];
            for &j in &visible {
                let w = weights[j] / total;
                for (ov, &vv) in o.iter_mut().zip(&v.row(j)[kvh * dh..(kvh + 1) * dh]) {
                    *ov += w * vv;
                }
            }
        }
    }
    Tensor::from_rows(nq, qc, out).ensure_finite("attention")
}

/// One decode step: appends `(k, v)` to the cache, evicting the oldest row if
/// full, then attends `q` over the cached rows.
pub fn decode_step<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    cache: &mut WindowCache<T>,
    n_heads: usize,
    n_kv_heads: usize,
    d_head: usize,
) -> Result<Vec<T>> {
    cache.push(k, v)?;
    let (kk, vv) = cache.ordered()?;
    let geom = AttnGeometry {
        n_heads,
        n_kv_heads,
        d_head,
        q_start: cache.position() - 1,
        k_start: cache.position() - cache.len(),
        window: Some(cache.capacity()),
    };
    let q = Tensor::from_rows(1, q.len(), q.to_vec());
    Ok(attend(&q, &kk, &vv, &geom)?.data().to_vec())
}

/// Windowed attention over new rows continuing from `cache`.
///
/// `geom.q_start` is the position of the first new row; the cache, when
/// given, must have seen exactly that many positions. Without a cache the
/// rows start a fresh sequence.
pub fn window_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    geom: &AttnGeometry,
    cache: Option<&mut WindowCache<T>>,
    paradigm: Paradigm,
) -> Result<Tensor<T>> {
    let window = geom
        .window
        .ok_or_else(|| Error::InvalidArgument("window attention without a window".into()))?;
    let n = q.rows();
    let mut local;
    let cache = match cache {
        Some(c) => c,
        None => {
            local = WindowCache::new(window, k.cols());
            local.position = geom.q_start;
            &mut local
        }
    };
    if cache.position() != geom.q_start || cache.capacity() != window {
        return Err(Error::InvalidArgument(format!(
            "window cache at position {} (capacity {}) for rows starting at {} (window {window})",
            cache.position(),
            cache.capacity(),
            geom.q_start
        )));
    }
    let block = match paradigm {
        Paradigm::Parallel => n.max(1),
        Paradigm::Recurrent => 1,
        Paradigm::Chunkwise(b) if b >= 1 => b,
        Paradigm::Chunkwise(_) => {
            return Err(Error::InvalidArgument("chunk size must be >= 1".into()))
        }
    };

    if block == 1 {
        let mut out = Vec::with_capacity(n * q.cols());
        for i in 0..n {
            out.extend(decode_step(
                q.row(i),
                k.row(i),
                v.row(i),
                cache,
                geom.n_heads,
                geom.n_kv_heads,
                geom.d_head,
            )?);
        }
        return Ok(Tensor::from_rows(n, q.cols(), out));
    }

    let mut outs = Vec::new();
    let mut start = 0;
    while start < n {
        let b = block.min(n - start);
        let (pk, pv) = cache.ordered()?;
        let kk = Tensor::concat_rows(&[pk, k.slice_rows(start, b)?])?;
        let vv = Tensor::concat_rows(&[pv, v.slice_rows(start, b)?])?;
        let g = AttnGeometry {
            q_start: geom.q_start + start,
            k_start: geom.q_start + start - cache.len(),
            ..*geom
        };
        outs.push(attend(&q.slice_rows(start, b)?, &kk, &vv, &g)?);
        cache.push_rows(&k.slice_rows(start, b)?, &v.slice_rows(start, b)?)?;
        start += b;
    }
    if outs.is_empty() {
        return Ok(Tensor::zeros(&[0, q.cols()]));
    }
    Tensor::concat_rows(&outs)
}

/// Projections of one sliding-window attention layer: `w_q, w_o: d×d`,
/// `w_k, w_v: d×(n_kv_heads·d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaWeights<W> {
    pub w_q: W,
    pub w_k: W,
    pub w_v: W,
    pub w_o: W,
}

/// Head layout and window for a sliding-window layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwaSettings {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub window: usize,
}

/// Rotary tables for query and key rows.
pub struct SwaRope<'a, T> {
    pub q: &'a RotaryTables<T>,
    pub k: &'a RotaryTables<T>,
}

/// Sliding-window self-attention layer over rows starting at `start_pos`.
pub fn swa_layer<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    w: &SwaWeights<O::V>,
    settings: &SwaSettings,
    rope: Option<SwaRope<'_, T>>,
    start_pos: usize,
    cache: Option<&mut WindowCache<T>>,
    paradigm: Paradigm,
) -> Result<O::V> {
    if settings.window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    let mut q = ops.matmul(x, &w.w_q)?;
    let mut k = ops.matmul(x, &w.w_k)?;
    let v = ops.matmul(x, &w.w_v)?;
    if let Some(r) = rope {
        q = ops.rotate_pairs(&q, &r.q.cos, &r.q.sin)?;
        k = ops.rotate_pairs(&k, &r.k.cos, &r.k.sin)?;
    }
    let geom = AttnGeometry {
        n_heads: settings.n_heads,
        n_kv_heads: settings.n_kv_heads,
        d_head: settings.d_head,
        q_start: start_pos,
        k_start: start_pos,
        window: Some(settings.window),
    };
    let y = ops.window_attention(&q, &k, &v, &geom, cache, paradigm)?;
    ops.matmul(&y, &w.w_o)
}

/// Parallel sliding-window attention over a fresh sequence, without rotary
/// embedding.
pub fn swa_forward<T: Real>(
    x: &Tensor<T>,
    w: &SwaWeights<Tensor<T>>,
    settings: &SwaSettings,
) -> Result<Tensor<T>> {
    swa_layer(&mut Eager, x, w, settings, None, 0, None, Paradigm::Parallel)
}
