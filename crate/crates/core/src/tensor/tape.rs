//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! is a valid topological order for backpropagation.

use super::ops::{default_attention, AttnGeometry, Ops, Paradigm};
use super::{sigmoid, Real, Tensor};
use crate::error::{Error, Result};
use crate::gret::{self, ChunkwiseSaved, GateState};
use crate::swa::WindowCache;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Const,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    LogSigmoid(usize),
    Exp(usize),
    Swish(usize),
    CumsumRows(usize),
    DecayMatrix(usize),
    Softmax(usize),
    RmsNorm { x: usize, gain: usize, eps: T },
    Standardize { x: usize, eps: T },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Rotate { x: usize, cos: Tensor<T>, sin: Tensor<T> },
    Gather { table: usize, ids: Vec<usize> },
    Sum(usize),
    Retention { inputs: [usize; 4], saved: Box<ChunkwiseSaved<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations for a single backward pass. Single owner; not `Sync`
/// by usage contract.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: &Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(
                "backward needs a scalar loss".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, &g)?;
            // leaves and constants keep their gradient
            grads[idx] = Some(g);
            for (parent, pg) in contributions {
                accumulate(&mut grads[parent], pg)?;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let v = |i: usize| &self.nodes[i].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Const => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_t(v(*b))?),
                (*b, v(*a).transpose()?.matmul(g)?),
            ],
            Op::MatMulT(a, b) => vec![
                (*a, g.matmul(v(*b))?),
                (*b, g.transpose()?.matmul(v(*a))?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Hadamard(a, b) => vec![(*a, g.hadamard(v(*b))?), (*b, g.hadamard(v(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, "sigmoid'", |g, y| g * y * (T::one() - y))?)],
            Op::LogSigmoid(a) => vec![(*a, g.zip_map(v(*a), "logsigmoid'", |g, x| g * sigmoid(-x))?)],
            Op::Exp(a) => vec![(*a, g.hadamard(y)?)],
            Op::Swish(a) => vec![(
                *a,
                g.zip_map(v(*a), "swish'", |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })?,
            )],
            Op::CumsumRows(a) => vec![(*a, g.rev_cumsum_rows()?)],
            Op::DecayMatrix(c) => {
                let p = g.hadamard(y)?;
                let n = p.rows();
                let dc = (0..n)
                    .map(|i| {
                        let row: T = p.row(i).iter().copied().sum();
                        let col: T = (0..n).map(|r| p.at(r, i)).sum();
                        row - col
                    })
                    .collect();
                vec![(*c, Tensor::from_rows(n, 1, dc))]
            }
            Op::Softmax(a) => {
                let (r, c) = y.dims2()?;
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - inner)));
                }
                vec![(*a, Tensor::from_rows(r, c, out))]
            }
            Op::RmsNorm { x, gain, eps } => {
                let (xv, gv) = (v(*x), v(*gain));
                let d = xv.cols();
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = Vec::with_capacity(xv.len());
                let mut dg = vec![T::zero(); d];
                for (row, grow) in xv.data().chunks(d).zip(g.data().chunks(d)) {
                    let ms = row.iter().map(|&a| a * a).sum::<T>() * inv_d;
                    let r = T::one() / (ms + *eps).sqrt();
                    let mut ux = T::zero();
                    for j in 0..d {
                        dg[j] += grow[j] * row[j] * r;
                        ux += grow[j] * gv.data()[j] * row[j];
                    }
                    let r3 = r * r * r * ux * inv_d;
                    dx.extend((0..d).map(|j| r * grow[j] * gv.data()[j] - r3 * row[j]));
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), dx)?),
                    (*gain, Tensor::new(gv.shape().to_vec(), dg)?),
                ]
            }
            Op::Standardize { x, eps } => {
                let xv = v(*x);
                let d = xv.cols();
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for (row, (yrow, grow)) in xv
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d).zip(g.data().chunks(d)))
                {
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_d;
                    let r = T::one() / (var + *eps).sqrt();
                    let gm = grow.iter().copied().sum::<T>() * inv_d;
                    let gy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| r * (gv - gm - yv * gy)));
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::SliceCols { a, start } => {
                let (r, c) = v(*a).dims2()?;
                let w = g.cols();
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                vec![(*a, Tensor::from_rows(r, c, out))]
            }
            Op::SliceRows { a, start } => {
                let (r, c) = v(*a).dims2()?;
                let mut out = vec![T::zero(); r * c];
                out[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, Tensor::from_rows(r, c, out))]
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = v(p).cols();
                    out.push((p, g.slice_cols(start, w)?));
                    start += w;
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let h = v(p).rows();
                    out.push((p, g.slice_rows(start, h)?));
                    start += h;
                }
                out
            }
            Op::Rotate { x, cos, sin } => {
                let neg_sin = sin.scale(-T::one());
                vec![(*x, g.rotate_pairs(cos, &neg_sin)?)]
            }
            Op::Gather { table, ids } => {
                let (r, c) = v(*table).dims2()?;
                let mut out = vec![T::zero(); r * c];
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &gv) in out[id * c..(id + 1) * c].iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
                vec![(*table, Tensor::from_rows(r, c, out))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), g.data()[0]))],
            Op::Retention { inputs, saved } => {
                let grads = gret::chunkwise_backward(g, None, saved)?;
                let n = grads.dlog_gamma.len();
                vec![
                    (inputs[0], grads.dq),
                    (inputs[1], grads.dk),
                    (inputs[2], grads.dv),
                    (inputs[3], Tensor::from_rows(n, 1, grads.dlog_gamma)),
                ]
            }
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g)?,
    });
    Ok(())
}

impl<T: Real> Ops<T> for Tape<T> {
    type V = Var;

    fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Const)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(v)
    }

    fn id(&self, v: &Var) -> usize {
        v.0
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    fn matmul_t(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.val(a).matmul_t(self.val(b))?;
        Ok(self.push(out, Op::MatMulT(a.0, b.0)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.val(a).hadamard(self.val(b))?;
        Ok(self.push(out, Op::Hadamard(a.0, b.0)))
    }

    fn scale(&mut self, a: &Var, s: T) -> Result<Var> {
        let out = self.val(a).scale(s);
        Ok(self.push(out, Op::Scale(a.0, s)))
    }

    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let out = self.val(a).sigmoid();
        Ok(self.push(out, Op::Sigmoid(a.0)))
    }

    fn logsigmoid(&mut self, a: &Var) -> Result<Var> {
        let out = self.val(a).logsigmoid();
        Ok(self.push(out, Op::LogSigmoid(a.0)))
    }

    fn exp(&mut self, a: &Var) -> Result<Var> {
        let out = self.val(a).exp().ensure_finite("exp")?;
        Ok(self.push(out, Op::Exp(a.0)))
    }

    fn swish(&mut self, a: &Var) -> Result<Var> {
        let out = self.val(a).swish();
        Ok(self.push(out, Op::Swish(a.0)))
    }

    fn cumsum_rows(&mut self, a: &Var) -> Result<Var> {
        let out = self.val(a).cumsum(0)?;
        Ok(self.push(out, Op::CumsumRows(a.0)))
    }

    fn decay_matrix(&mut self, c: &Var) -> Result<Var> {
        let out = self.val(c).decay_matrix()?;
        Ok(self.push(out, Op::DecayMatrix(c.0)))
    }

    fn softmax_masked(&mut self, logits: &Var, mask: &Tensor<T>) -> Result<Var> {
        let out = self.val(logits).softmax_masked(mask)?;
        Ok(self.push(out, Op::Softmax(logits.0)))
    }

    fn rmsnorm(&mut self, x: &Var, gain: &Var, eps: T) -> Result<Var> {
        let out = self.val(x).rmsnorm(self.val(gain), eps)?;
        Ok(self.push(
            out,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                eps,
            },
        ))
    }

    fn standardize_rows(&mut self, x: &Var, eps: T) -> Result<Var> {
        let out = self.val(x).standardize_rows(eps)?;
        Ok(self.push(out, Op::Standardize { x: x.0, eps }))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let out = self.val(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols { a: a.0, start }))
    }

    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let out = self.val(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { a: a.0, start }))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|p| self.val(p).clone()).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|p| self.val(p).clone()).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    fn rotate_pairs(&mut self, x: &Var, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<Var> {
        let out = self.val(x).rotate_pairs(cos, sin)?;
        Ok(self.push(
            out,
            Op::Rotate {
                x: x.0,
                cos: cos.clone(),
                sin: sin.clone(),
            },
        ))
    }

    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let out = self.val(table).gather_rows(ids)?;
        Ok(self.push(
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a).sum());
        Ok(self.push(out, Op::Sum(a.0)))
    }

    fn gated_retention(
        &mut self,
        q: &Var,
        k: &Var,
        v: &Var,
        log_gamma: &Var,
        paradigm: Paradigm,
        init: Option<&GateState<T>>,
    ) -> Result<(Var, GateState<T>)> {
        match paradigm {
            Paradigm::Parallel => {
                if init.is_some() {
                    return Err(Error::InvalidArgument(
                        "taped parallel retention starts from an empty state".into(),
                    ));
                }
                let cum = self.cumsum_rows(log_gamma)?;
                let decay = self.decay_matrix(&cum)?;
                let scores = self.matmul_t(q, k)?;
                let weighted = self.hadamard(&scores, &decay)?;
                let out = self.matmul(&weighted, v)?;
                let state = gret::final_state(
                    self.val(k),
                    self.val(v),
                    self.val(log_gamma).data(),
                    None,
                )?;
                Ok((out, state))
            }
            Paradigm::Recurrent | Paradigm::Chunkwise(_) => {
                let chunk = match paradigm {
                    Paradigm::Chunkwise(b) => b,
                    _ => 1,
                };
                let (out, state, saved) = gret::chunkwise_saved(
                    self.val(q),
                    self.val(k),
                    self.val(v),
                    self.val(log_gamma).data(),
                    chunk,
                    init,
                )?;
                let var = self.push(
                    out,
                    Op::Retention {
                        inputs: [q.0, k.0, v.0, log_gamma.0],
                        saved: Box::new(saved),
                    },
                );
                Ok((var, state))
            }
        }
    }

    fn window_attention(
        &mut self,
        q: &Var,
        k: &Var,
        v: &Var,
        geom: &AttnGeometry,
        cache: Option<&mut WindowCache<T>>,
        _paradigm: Paradigm,
    ) -> Result<Var> {
        // All paradigms are numerically identical; the tape always records the
        // parallel form over cached prefix + new rows.
        let (kk, vv, g) = match cache.as_deref() {
            Some(c) if !c.is_empty() => {
                let (pk, pv) = c.ordered()?;
                let pk = self.input(&pk);
                let pv = self.input(&pv);
                let kk = self.concat_rows(&[pk, *k])?;
                let vv = self.concat_rows(&[pv, *v])?;
                let g = AttnGeometry {
                    k_start: geom.q_start - c.len(),
                    ..*geom
                };
                (kk, vv, g)
            }
            _ => (*k, *v, *geom),
        };
        let out = default_attention(self, q, &kk, &vv, &g)?;
        if let Some(c) = cache {
            let (kv, vv) = (self.val(k).clone(), self.val(v).clone());
            c.push_rows(&kv, &vv)?;
        }
        Ok(out)
    }
}

/// Outcome of comparing taped gradients with central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(leaf, element, analytic, finite difference)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares the taped gradient of `f` at `leaves` against central finite
/// differences with step `h`, on at most `max_per_leaf` evenly spaced
/// coordinates of each leaf.
///
/// The error at a coordinate is `|analytic - fd| / max(|analytic|, |fd|, 1e-6)`;
/// the floor keeps coordinates with an exactly zero gradient from scoring
/// finite-difference rounding noise as relative error.
pub fn grad_check<F>(
    leaves: &[Tensor<f64>],
    f: F,
    h: f64,
    max_per_leaf: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.val(&loss).data()[0];
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("grad_check loss"))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.val(&loss).data()[0].is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut point = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(vars[li]);
        let n = leaf.len();
        let count = n.min(max_per_leaf.max(1));
        for c in 0..count {
            let e = c * n / count;
            let mut plus = leaf.data().to_vec();
            plus[e] += h;
            point[li] = Tensor::new(leaf.shape().to_vec(), plus)?;
            let fp = eval(&point)?;
            let mut minus = leaf.data().to_vec();
            minus[e] -= h;
            point[li] = Tensor::new(leaf.shape().to_vec(), minus)?;
            let fm = eval(&point)?;
            point[li] = leaf.clone();

            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((li, e, a, fd));
            }
        }
    }
    Ok(report)
}
