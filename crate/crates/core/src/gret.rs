//! Gated retention.
//!
//! Three numerically equivalent ways of computing
//! `o_n = Σ_{m≤n} (Π_{i=m+1..n} γ_i) (q_n·k_m) v_m`:
//!
//! * parallel: a lower-triangular decay matrix applied to `QKᵀ`,
//! * recurrent: `S_n = γ_n S_{n-1} + k_nᵀ v_n`, `o_n = q_n S_n`,
//! * chunkwise: dense inside a chunk, state carried across chunks.
//!
//! Every decay product is formed from cumulative sums of `log γ`, never as a
//! running product, so long sequences do not underflow.

use crate::error::{Error, Result};
use crate::model::rope::RotaryTables;
use crate::tensor::{dot, Ops, Paradigm, Real, Tensor};

/// Head-wise, per-position decay `γ = sigmoid(x W_γ)^(1/τ)`, stored as logs.
#[derive(Debug, Clone)]
pub struct DecaySchedule<T> {
    /// `heads × n`
    pub log_gamma: Tensor<T>,
    pub tau: f64,
}

impl<T: Real> DecaySchedule<T> {
    pub fn gamma(&self) -> Tensor<T> {
        self.log_gamma.exp()
    }

    pub fn head(&self, h: usize) -> &[T] {
        self.log_gamma.row(h)
    }

    pub fn heads(&self) -> usize {
        self.log_gamma.rows()
    }
}

/// `x: n×d`, `w_gamma: d×heads`.
pub fn decay_from_input<T: Real>(
    x: &Tensor<T>,
    w_gamma: &Tensor<T>,
    tau: f64,
) -> Result<DecaySchedule<T>> {
    if !(tau >= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must be >= 1, got {tau}")));
    }
    let logits = x.matmul(w_gamma)?;
    let log_gamma = logits.logsigmoid().scale(T::of(1.0 / tau)).transpose()?;
    Ok(DecaySchedule {
        log_gamma: log_gamma.ensure_finite("decay_from_input")?,
        tau,
    })
}

/// Recurrent state `S` of one head (`d_k × d_v`) and the number of positions
/// folded into it.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState<T> {
    pub s: Tensor<T>,
    pub position: usize,
}

impl<T: Real> GateState<T> {
    pub fn zeros(d_k: usize, d_v: usize) -> Self {
        Self {
            s: Tensor::zeros(&[d_k, d_v]),
            position: 0,
        }
    }

    pub fn values(&self) -> usize {
        self.s.len()
    }
}

/// Fault injection for the verification harness. Never used by inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales the cross-chunk contribution by 1/2.
    CorruptCrossTerm,
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, lg: &[T]) -> Result<usize> {
    let (n, dk) = q.dims2()?;
    let (nk, dk2) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if nk != n || nv != n || dk2 != dk || lg.len() != n {
        return Err(Error::Shape {
            op: "gated retention",
            lhs: q.shape().to_vec(),
            rhs: vec![nk, dk2, nv, lg.len()],
        });
    }
    Ok(n)
}

fn check_state<T: Real>(state: &GateState<T>, dk: usize, dv: usize) -> Result<()> {
    if state.s.shape() != [dk, dv] {
        return Err(Error::Shape {
            op: "gate state",
            lhs: state.s.shape().to_vec(),
            rhs: vec![dk, dv],
        });
    }
    Ok(())
}

fn cumulative<T: Real>(lg: &[T]) -> Vec<T> {
    lg.iter()
        .scan(T::zero(), |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Dispatches to one paradigm. `init` defaults to a zero state.
pub fn retention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    paradigm: Paradigm,
    init: Option<&GateState<T>>,
) -> Result<(Tensor<T>, GateState<T>)> {
    match paradigm {
        Paradigm::Parallel => parallel_with_state(q, k, v, log_gamma, init),
        Paradigm::Recurrent => recurrent(q, k, v, log_gamma, init),
        Paradigm::Chunkwise(b) => chunkwise(q, k, v, log_gamma, b, init),
    }
}

/// Parallel form `(QKᵀ ⊙ D) V` with `D_nm = exp(c_n - c_m)` for `m ≤ n`.
pub fn parallel<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
) -> Result<Tensor<T>> {
    check_qkv(q, k, v, log_gamma)?;
    let n = q.rows();
    let cum = Tensor::from_rows(n, 1, cumulative(log_gamma));
    q.matmul_t(k)?
        .hadamard(&cum.decay_matrix()?)?
        .matmul(v)?
        .ensure_finite("gret parallel")
}

/// Parallel form continuing from `init`; also returns the closed-form final state.
pub fn parallel_with_state<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    init: Option<&GateState<T>>,
) -> Result<(Tensor<T>, GateState<T>)> {
    let mut out = parallel(q, k, v, log_gamma)?;
    if let Some(s0) = init {
        check_state(s0, q.cols(), v.cols())?;
        let cum = cumulative(log_gamma);
        let cross = q.matmul(&s0.s)?;
        let dv = v.cols();
        let scaled: Vec<T> = cross
            .data()
            .chunks(dv)
            .zip(&cum)
            .flat_map(|(row, &c)| row.iter().map(move |&x| x * c.exp()))
            .collect();
        out = out.add(&Tensor::from_rows(q.rows(), dv, scaled))?;
    }
    let state = final_state(k, v, log_gamma, init)?;
    Ok((out.ensure_finite("gret parallel")?, state))
}

/// Closed form `S_n = exp(c_n) S_0 + Σ_m exp(c_n - c_m) k_mᵀ v_m`.
pub fn final_state<T: Real>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    init: Option<&GateState<T>>,
) -> Result<GateState<T>> {
    let (n, dk) = k.dims2()?;
    let dv = v.cols();
    let cum = cumulative(log_gamma);
    let last = cum.last().copied().unwrap_or(T::zero());
    let mut s = match init {
        Some(s0) => {
            check_state(s0, dk, dv)?;
            s0.s.scale(last.exp()).data().to_vec()
        }
        None => vec![T::zero(); dk * dv],
    };
    for m in 0..n {
        let w = (last - cum[m]).exp();
        outer_acc(&mut s, k.row(m), v.row(m), w);
    }
    let position = init.map_or(0, |s0| s0.position) + n;
    Ok(GateState {
        s: Tensor::from_rows(dk, dv, s).ensure_finite("gret state")?,
        position,
    })
}

fn outer_acc<T: Real>(s: &mut [T], k: &[T], v: &[T], w: T) {
    let dv = v.len();
    for (i, &ki) in k.iter().enumerate() {
        let kw = ki * w;
        for (sv, &vv) in s[i * dv..(i + 1) * dv].iter_mut().zip(v) {
            *sv += kw * vv;
        }
    }
}

fn row_times_state<T: Real>(q: &[T], s: &[T], dv: usize) -> Vec<T> {
    let mut out = vec![T::zero(); dv];
    for (i, &qi) in q.iter().enumerate() {
        for (o, &sv) in out.iter_mut().zip(&s[i * dv..(i + 1) * dv]) {
            *o += qi * sv;
        }
    }
    out
}

/// One recurrent step: `S_n = γ_n S_{n-1} + k_nᵀ v_n`, output `q_n S_n`.
pub fn recurrent_step<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    log_gamma: T,
    state: &GateState<T>,
) -> Result<(Vec<T>, GateState<T>)> {
    check_state(state, q.len(), v.len())?;
    if k.len() != q.len() {
        return Err(Error::Shape {
            op: "recurrent_step",
            lhs: vec![q.len()],
            rhs: vec![k.len()],
        });
    }
    let s = state.s.scale(log_gamma.exp());
    let mut s = s.data().to_vec();
    outer_acc(&mut s, k, v, T::one());
    let out = row_times_state(q, &s, v.len());
    let next = GateState {
        s: Tensor::from_rows(q.len(), v.len(), s).ensure_finite("gret recurrent state")?,
        position: state.position + 1,
    };
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gret recurrent output"));
    }
    Ok((out, next))
}

/// Recurrent form over a whole sequence.
pub fn recurrent<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    init: Option<&GateState<T>>,
) -> Result<(Tensor<T>, GateState<T>)> {
    let n = check_qkv(q, k, v, log_gamma)?;
    let (dk, dv) = (q.cols(), v.cols());
    let mut state = match init {
        Some(s) => {
            check_state(s, dk, dv)?;
            s.clone()
        }
        None => GateState::zeros(dk, dv),
    };
    let mut out = Vec::with_capacity(n * dv);
    for t in 0..n {
        let (o, next) = recurrent_step(q.row(t), k.row(t), v.row(t), log_gamma[t], &state)?;
        out.extend(o);
        state = next;
    }
    Ok((Tensor::from_rows(n, dv, out), state))
}

/// One chunk of the chunkwise form: inner-chunk term
/// `(Q Kᵀ ⊙ D) V` plus cross-chunk term `(Q R_prev) ⊙ β`, and the next state
/// `R = Kᵀ (V ⊙ β_B/β) + β_B R_prev`.
pub fn chunk<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    r_prev: &GateState<T>,
) -> Result<(Tensor<T>, GateState<T>)> {
    chunk_with_fault(q, k, v, log_gamma, r_prev, Fault::None)
}

pub fn chunk_with_fault<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    r_prev: &GateState<T>,
    fault: Fault,
) -> Result<(Tensor<T>, GateState<T>)> {
    let b = check_qkv(q, k, v, log_gamma)?;
    let (dk, dv) = (q.cols(), v.cols());
    check_state(r_prev, dk, dv)?;
    let cum = cumulative(log_gamma);
    let last = cum.last().copied().unwrap_or(T::zero());

    let inner = q
        .matmul_t(k)?
        .hadamard(&Tensor::from_rows(b, 1, cum.clone()).decay_matrix()?)?
        .matmul(v)?;
    let cross = q.matmul(&r_prev.s)?;
    let cross_scale = match fault {
        Fault::None => T::one(),
        Fault::CorruptCrossTerm => T::of(0.5),
    };
    let mut out = inner.data().to_vec();
    for j in 0..b {
        let beta = cum[j].exp() * cross_scale;
        for (o, &x) in out[j * dv..(j + 1) * dv].iter_mut().zip(cross.row(j)) {
            *o += x * beta;
        }
    }

    let mut r = r_prev.s.scale(last.exp()).data().to_vec();
    for m in 0..b {
        outer_acc(&mut r, k.row(m), v.row(m), (last - cum[m]).exp());
    }
    let out = Tensor::from_rows(b, dv, out).ensure_finite("gret chunkwise output")?;
    let state = GateState {
        s: Tensor::from_rows(dk, dv, r).ensure_finite("gret chunkwise state")?,
        position: r_prev.position + b,
    };
    Ok((out, state))
}

/// Chunkwise form over a whole sequence with chunk size `chunk_size`; the last
/// chunk may be shorter.
pub fn chunkwise<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    chunk_size: usize,
    init: Option<&GateState<T>>,
) -> Result<(Tensor<T>, GateState<T>)> {
    chunkwise_with_fault(q, k, v, log_gamma, chunk_size, init, Fault::None)
}

pub fn chunkwise_with_fault<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    chunk_size: usize,
    init: Option<&GateState<T>>,
    fault: Fault,
) -> Result<(Tensor<T>, GateState<T>)> {
    let (out, state, _) = run_chunks(q, k, v, log_gamma, chunk_size, init, fault, false)?;
    Ok((out, state))
}

/// Values kept from a chunkwise forward pass for [`chunkwise_backward`].
#[derive(Debug, Clone)]
pub struct ChunkwiseSaved<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub log_gamma: Vec<T>,
    pub chunk_size: usize,
    /// State entering each chunk.
    pub states: Vec<Tensor<T>>,
}

/// Chunkwise forward that also records what the analytic backward needs.
pub fn chunkwise_saved<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    chunk_size: usize,
    init: Option<&GateState<T>>,
) -> Result<(Tensor<T>, GateState<T>, ChunkwiseSaved<T>)> {
    let (out, state, states) =
        run_chunks(q, k, v, log_gamma, chunk_size, init, Fault::None, true)?;
    let saved = ChunkwiseSaved {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        log_gamma: log_gamma.to_vec(),
        chunk_size,
        states,
    };
    Ok((out, state, saved))
}

#[allow(clippy::too_many_arguments)]
fn run_chunks<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_gamma: &[T],
    chunk_size: usize,
    init: Option<&GateState<T>>,
    fault: Fault,
    save: bool,
) -> Result<(Tensor<T>, GateState<T>, Vec<Tensor<T>>)> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk size must be >= 1".into()));
    }
    let n = check_qkv(q, k, v, log_gamma)?;
    let (dk, dv) = (q.cols(), v.cols());
    let mut state = match init {
        Some(s) => {
            check_state(s, dk, dv)?;
            s.clone()
        }
        None => GateState::zeros(dk, dv),
    };
    let mut saved = Vec::new();
    let mut outs = Vec::with_capacity(n.div_ceil(chunk_size));
    let mut start = 0;
    while start < n {
        let b = chunk_size.min(n - start);
        if save {
            saved.push(state.s.clone());
        }
        let (o, next) = chunk_with_fault(
            &q.slice_rows(start, b)?,
            &k.slice_rows(start, b)?,
            &v.slice_rows(start, b)?,
            &log_gamma[start..start + b],
            &state,
            fault,
        )?;
        outs.push(o);
        state = next;
        start += b;
    }
    let out = if outs.is_empty() {
        Tensor::zeros(&[0, dv])
    } else {
        Tensor::concat_rows(&outs)?
    };
    Ok((out, state, saved))
}

/// Gradients of a chunkwise forward pass.
#[derive(Debug, Clone)]
pub struct ChunkwiseGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dlog_gamma: Vec<T>,
    /// Gradient with respect to the state the forward started from.
    pub d_init: Tensor<T>,
}

/// Analytic backward of the chunkwise form. `d_out` is the gradient of the
/// loss with respect to the output, `d_state` (optional) with respect to the
/// final state.
pub fn chunkwise_backward<T: Real>(
    d_out: &Tensor<T>,
    d_state: Option<&Tensor<T>>,
    saved: &ChunkwiseSaved<T>,
) -> Result<ChunkwiseGrads<T>> {
    let ChunkwiseSaved {
        q,
        k,
        v,
        log_gamma,
        chunk_size,
        states,
    } = saved;
    let n = check_qkv(q, k, v, log_gamma)?;
    let (dk_dim, dv_dim) = (q.cols(), v.cols());
    let n_chunks = if *chunk_size == 0 { 0 } else { n.div_ceil(*chunk_size) };
    if *chunk_size == 0 || states.len() != n_chunks {
        return Err(Error::MissingSaved(format!(
            "expected {n_chunks} chunk states, found {}",
            states.len()
        )));
    }
    if states.iter().any(|s| s.shape() != [dk_dim, dv_dim]) {
        return Err(Error::MissingSaved("chunk state has the wrong shape".into()));
    }
    if d_out.shape() != [n, dv_dim] {
        return Err(Error::Shape {
            op: "chunkwise_backward",
            lhs: d_out.shape().to_vec(),
            rhs: vec![n, dv_dim],
        });
    }

    let mut dq = vec![T::zero(); n * dk_dim];
    let mut dk = vec![T::zero(); n * dk_dim];
    let mut dv = vec![T::zero(); n * dv_dim];
    let mut dlg = vec![T::zero(); n];
    let mut d_r = match d_state {
        Some(g) => g.clone(),
        None => Tensor::zeros(&[dk_dim, dv_dim]),
    };

    for ci in (0..n_chunks).rev() {
        let s = ci * chunk_size;
        let b = (*chunk_size).min(n - s);
        let qc = q.slice_rows(s, b)?;
        let kc = k.slice_rows(s, b)?;
        let vc = v.slice_rows(s, b)?;
        let g = d_out.slice_rows(s, b)?;
        let r_prev = &states[ci];
        let cum = cumulative(&log_gamma[s..s + b]);
        let last = cum[b - 1];
        let beta: Vec<T> = cum.iter().map(|c| c.exp()).collect();
        let w: Vec<T> = cum.iter().map(|&c| (last - c).exp()).collect();
        let beta_b = last.exp();

        let decay = Tensor::from_rows(b, 1, cum.clone()).decay_matrix()?;
        let p = qc.matmul_t(&kc)?;
        let a = p.hadamard(&decay)?;

        // inner-chunk term
        let d_a = g.matmul_t(&vc)?;
        let mut dvc = a.transpose()?.matmul(&g)?.data().to_vec();
        let d_p = d_a.hadamard(&decay)?;
        let d_d = d_a.hadamard(&p)?;
        let mut dqc = d_p.matmul(&kc)?.data().to_vec();
        let mut dkc = d_p.transpose()?.matmul(&qc)?.data().to_vec();

        // cross-chunk term
        let x = qc.matmul(r_prev)?;
        let mut dc = vec![T::zero(); b];
        let mut d_x = Vec::with_capacity(b * dv_dim);
        for j in 0..b {
            dc[j] += dot(g.row(j), x.row(j)) * beta[j];
            d_x.extend(g.row(j).iter().map(|&gv| gv * beta[j]));
        }
        let d_x = Tensor::from_rows(b, dv_dim, d_x);
        for (o, &val) in dqc.iter_mut().zip(d_x.matmul_t(r_prev)?.data()) {
            *o += val;
        }
        let mut d_rprev = qc.transpose()?.matmul(&d_x)?;

        // state update R = Kᵀ (V ⊙ w) + β_B R_prev
        let k_dr = kc.matmul(&d_r)?;
        for m in 0..b {
            let vr = vc.row(m);
            let kr = k_dr.row(m);
            for (t, o) in dkc[m * dk_dim..(m + 1) * dk_dim].iter_mut().enumerate() {
                *o += w[m] * dot(vr, d_r.row(t));
            }
            for (o, &kv) in dvc[m * dv_dim..(m + 1) * dv_dim].iter_mut().zip(kr) {
                *o += w[m] * kv;
            }
            let dw = dot(kr, vr) * w[m];
            dc[b - 1] += dw;
            dc[m] -= dw;
        }
        dc[b - 1] += dot(d_r.data(), r_prev.data()) * beta_b;
        d_rprev = d_rprev.add(&d_r.scale(beta_b))?;

        // decay matrix D_jm = exp(c_j - c_m)
        let pd = d_d.hadamard(&decay)?;
        for j in 0..b {
            dc[j] += pd.row(j).iter().copied().sum::<T>();
            for i in 0..b {
                dc[j] -= pd.at(i, j);
            }
        }

        // c = cumsum(log γ)
        let mut acc = T::zero();
        for j in (0..b).rev() {
            acc += dc[j];
            dlg[s + j] = acc;
        }
        dq[s * dk_dim..(s + b) * dk_dim].copy_from_slice(&dqc);
        dk[s * dk_dim..(s + b) * dk_dim].copy_from_slice(&dkc);
        dv[s * dv_dim..(s + b) * dv_dim].copy_from_slice(&dvc);
        d_r = d_rprev;
    }

    Ok(ChunkwiseGrads {
        dq: Tensor::from_rows(n, dk_dim, dq),
        dk: Tensor::from_rows(n, dk_dim, dk),
        dv: Tensor::from_rows(n, dv_dim, dv),
        dlog_gamma: dlg,
        d_init: d_r,
    })
}

/// Weights of one multi-head gated retention layer. `w_gamma` is `d×heads`,
/// every other matrix `d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GretWeights<W> {
    pub w_q: W,
    pub w_k: W,
    pub w_v: W,
    pub w_gamma: W,
    pub w_g: W,
    pub w_o: W,
}

/// Shape and normalization settings for [`mhgr_forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhgrSettings {
    pub n_heads: usize,
    pub d_head: usize,
    pub tau: f64,
    /// Per-head normalization of the retention output.
    pub group_norm: bool,
    pub group_norm_eps: f64,
}

/// Multi-head gated retention:
/// `(swish(x W_G) ⊙ GroupNorm(concat_h gRet_h(x))) W_O`.
///
/// `states` holds one [`GateState`] per head; pass an empty vector to start
/// from zero. On return it holds the states after the last row. `rope`, when
/// given, rotates queries and keys (tables must cover all heads).
pub fn mhgr_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    w: &GretWeights<O::V>,
    settings: &MhgrSettings,
    rope: Option<&RotaryTables<T>>,
    paradigm: Paradigm,
    states: &mut Vec<GateState<T>>,
) -> Result<O::V> {
    let d = ops.value(x).cols();
    let (h, dh) = (settings.n_heads, settings.d_head);
    if h * dh != d {
        return Err(Error::Shape {
            op: "mhgr_forward",
            lhs: vec![d],
            rhs: vec![h, dh],
        });
    }
    if !states.is_empty() && states.len() != h {
        return Err(Error::InvalidArgument(format!(
            "{} gate states for {h} heads",
            states.len()
        )));
    }
    let mut q = ops.matmul(x, &w.w_q)?;
    let mut k = ops.matmul(x, &w.w_k)?;
    let v = ops.matmul(x, &w.w_v)?;
    if let Some(r) = rope {
        q = ops.rotate_pairs(&q, &r.cos, &r.sin)?;
        k = ops.rotate_pairs(&k, &r.cos, &r.sin)?;
    }
    let q = ops.scale(&q, T::one() / T::of(dh as f64).sqrt())?;
    let gate_logits = ops.matmul(x, &w.w_gamma)?;
    let lg = ops.logsigmoid(&gate_logits)?;
    let lg = ops.scale(&lg, T::of(1.0 / settings.tau))?;

    let mut heads = Vec::with_capacity(h);
    let mut next_states = Vec::with_capacity(h);
    for head in 0..h {
        let qh = ops.slice_cols(&q, head * dh, dh)?;
        let kh = ops.slice_cols(&k, head * dh, dh)?;
        let vh = ops.slice_cols(&v, head * dh, dh)?;
        let lgh = ops.slice_cols(&lg, head, 1)?;
        let (o, s) = ops.gated_retention(&qh, &kh, &vh, &lgh, paradigm, states.get(head))?;
        let o = if settings.group_norm {
            ops.standardize_rows(&o, T::of(settings.group_norm_eps))?
        } else {
            o
        };
        heads.push(o);
        next_states.push(s);
    }
    *states = next_states;
    let y = ops.concat_cols(&heads)?;
    let gate = ops.matmul(x, &w.w_g)?;
    let gate = ops.swish(&gate)?;
    let gated = ops.hadamard(&gate, &y)?;
    let out = ops.matmul(&gated, &w.w_o)?;
    if !ops.value(&out).is_finite() {
        return Err(Error::NonFinite("mhgr_forward"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Eager, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut impl Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_lg(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-0.3..-0.001)).collect()
    }

    /// Direct evaluation of the defining sum with explicit decay products.
    fn scalar_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, gamma: &[f64]) -> Tensor<f64> {
        let (n, dv) = (q.rows(), v.cols());
        Tensor::from_fn(n, dv, |t, c| {
            let mut s = 0.0;
            for m in 0..=t {
                let mut decay = 1.0;
                for g in &gamma[m + 1..=t] {
                    decay *= g;
                }
                let qk: f64 = (0..q.cols()).map(|i| q.at(t, i) * k.at(m, i)).sum();
                s += decay * qk * v.at(m, c);
            }
            s
        })
    }

    #[test]
    fn decay_from_input_examples() {
        let x = Tensor::<f64>::zeros(&[3, 4]);
        let w = Tensor::zeros(&[4, 2]);
        let d = decay_from_input(&x, &w, 1.0).unwrap();
        assert!(d.gamma().data().iter().all(|&g| (g - 0.5).abs() < 1e-15));
        let d = decay_from_input(&x, &w, 16.0).unwrap();
        assert!((d.gamma().at(0, 0) - 0.957603).abs() < 1e-6);
        assert!((d.gamma().at(0, 0) - 0.5f64.powf(1.0 / 16.0)).abs() < 1e-15);
        assert!(decay_from_input(&x, &w, 0.5).is_err());
    }

    #[test]
    fn decay_moves_toward_one_as_tau_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, 5, 4);
        let w = rand_t(&mut rng, 4, 3).scale(4.0);
        let mut prev = decay_from_input(&x, &w, 1.0).unwrap().gamma();
        for tau in [2.0, 4.0, 16.0, 64.0, 1024.0] {
            let g = decay_from_input(&x, &w, tau).unwrap().gamma();
            for (a, b) in g.data().iter().zip(prev.data()) {
                assert!(a >= b && *a < 1.0 && *a > 0.0);
            }
            prev = g;
        }
    }

    #[test]
    fn parallel_single_step_and_hand_example() {
        let q = Tensor::from_rows(1, 2, vec![0.5, -1.0]);
        let k = Tensor::from_rows(1, 2, vec![2.0, 1.0]);
        let v = Tensor::from_rows(1, 3, vec![1.0, 2.0, 3.0]);
        let out = parallel(&q, &k, &v, &[-0.7]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]); // q·k = 0

        let q = Tensor::from_rows(2, 1, vec![1.0, 1.0]);
        let k = Tensor::from_rows(2, 1, vec![1.0, 2.0]);
        let v = Tensor::from_rows(2, 1, vec![1.0, 3.0]);
        let lg = [0.3f64.ln(), 0.5f64.ln()];
        let out = parallel(&q, &k, &v, &lg).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!((out.data()[1] - 6.5).abs() < 1e-14);

        let (rec, state) = recurrent(&q, &k, &v, &lg, None).unwrap();
        assert!((rec.data()[1] - 6.5).abs() < 1e-14);
        assert!((state.s.data()[0] - 6.5).abs() < 1e-14);
        assert_eq!(state.position, 2);
    }

    #[test]
    fn unit_decay_is_causal_linear_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_t(&mut rng, 9, 3), rand_t(&mut rng, 9, 3), rand_t(&mut rng, 9, 2));
        let out = parallel(&q, &k, &v, &[0.0; 9]).unwrap();
        let want = scalar_oracle(&q, &k, &v, &[1.0; 9]);
        assert!(out.max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn decay_matrix_matches_direct_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lg = rand_lg(&mut rng, 16);
        let gamma: Vec<f64> = lg.iter().map(|x| x.exp()).collect();
        let d = Tensor::from_rows(16, 1, cumulative(&lg)).decay_matrix().unwrap();
        for n in 0..16 {
            assert_eq!(d.at(n, n), 1.0);
            for m in 0..16 {
                if m > n {
                    assert_eq!(d.at(n, m), 0.0);
                } else {
                    let direct: f64 = gamma[m + 1..=n].iter().product();
                    assert!((d.at(n, m) - direct).abs() <= 1e-13);
                }
            }
        }
    }

    #[test]
    fn three_paradigms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 128;
        let (q, k, v) = (rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 5));
        let lg = rand_lg(&mut rng, n);
        let par = parallel(&q, &k, &v, &lg).unwrap();
        let (rec, s_rec) = recurrent(&q, &k, &v, &lg, None).unwrap();
        assert!(par.max_abs_diff(&rec) <= 1e-10);
        let oracle = scalar_oracle(
            &q.slice_rows(0, 20).unwrap(),
            &k.slice_rows(0, 20).unwrap(),
            &v.slice_rows(0, 20).unwrap(),
            &lg[..20].iter().map(|x| x.exp()).collect::<Vec<_>>(),
        );
        assert!(par.slice_rows(0, 20).unwrap().max_abs_diff(&oracle) <= 1e-10);
        for b in [1, 3, 16, 128, 256] {
            let (ch, s_ch) = chunkwise(&q, &k, &v, &lg, b, None).unwrap();
            assert!(ch.max_abs_diff(&rec) <= 1e-10, "B={b}");
            assert!(s_ch.s.max_abs_diff(&s_rec.s) <= 1e-10, "B={b}");
        }
        let closed = final_state(&k, &v, &lg, None).unwrap();
        assert!(closed.s.max_abs_diff(&s_rec.s) <= 1e-10);
    }

    #[test]
    fn chunk_size_one_tracks_recurrence_exactly_step_by_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let (q, k, v) = (rand_t(&mut rng, n, 3), rand_t(&mut rng, n, 3), rand_t(&mut rng, n, 3));
        let lg = rand_lg(&mut rng, n);
        let mut rs = GateState::zeros(3, 3);
        let mut cs = GateState::zeros(3, 3);
        for t in 0..n {
            let (ro, rn) = recurrent_step(q.row(t), k.row(t), v.row(t), lg[t], &rs).unwrap();
            let (co, cn) = chunk(
                &q.slice_rows(t, 1).unwrap(),
                &k.slice_rows(t, 1).unwrap(),
                &v.slice_rows(t, 1).unwrap(),
                &lg[t..t + 1],
                &cs,
            )
            .unwrap();
            for (a, b) in ro.iter().zip(co.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert!(rn.s.max_abs_diff(&cn.s) <= 1e-12);
            rs = rn;
            cs = cn;
        }
    }

    #[test]
    fn state_continuation_matches_one_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 40;
        let (q, k, v) = (rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 4), rand_t(&mut rng, n, 4));
        let lg = rand_lg(&mut rng, n);
        let (full, s_full) = recurrent(&q, &k, &v, &lg, None).unwrap();
        let split = 17;
        let head = |t: &Tensor<f64>| t.slice_rows(0, split).unwrap();
        let tail = |t: &Tensor<f64>| t.slice_rows(split, n - split).unwrap();
        let (_, s1) = parallel_with_state(&head(&q), &head(&k), &head(&v), &lg[..split], None).unwrap();
        let (o2, s2) =
            parallel_with_state(&tail(&q), &tail(&k), &tail(&v), &lg[split..], Some(&s1)).unwrap();
        assert!(o2.max_abs_diff(&tail(&full)) <= 1e-10);
        assert!(s2.s.max_abs_diff(&s_full.s) <= 1e-10);
        assert_eq!(s2.position, n);
    }

    #[test]
    fn recurrent_step_is_linear_in_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (rand_t(&mut rng, 1, 4), rand_t(&mut rng, 1, 4), rand_t(&mut rng, 1, 4));
        let s1 = GateState { s: rand_t(&mut rng, 4, 4), position: 3 };
        let s2 = GateState { s: rand_t(&mut rng, 4, 4), position: 3 };
        let (a, b) = (0.7, -1.3);
        let lg = -0.2;
        let combo = GateState { s: s1.s.scale(a).add(&s2.s.scale(b)).unwrap(), position: 3 };
        let zero_kv = vec![0.0; 4];
        // with k = 0 the output is exactly q·(γ S)
        let (o, _) = recurrent_step(q.data(), &zero_kv, &zero_kv, lg, &combo).unwrap();
        let (o1, _) = recurrent_step(q.data(), &zero_kv, &zero_kv, lg, &s1).unwrap();
        let (o2, _) = recurrent_step(q.data(), &zero_kv, &zero_kv, lg, &s2).unwrap();
        for i in 0..4 {
            assert!((o[i] - (a * o1[i] + b * o2[i])).abs() <= 1e-12);
        }
        let _ = (k, v);
    }

    #[test]
    fn fault_changes_chunkwise_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let (q, k, v) = (rand_t(&mut rng, n, 2), rand_t(&mut rng, n, 2), rand_t(&mut rng, n, 2));
        let lg = rand_lg(&mut rng, n);
        let (good, _) = chunkwise(&q, &k, &v, &lg, 4, None).unwrap();
        let (bad, _) =
            chunkwise_with_fault(&q, &k, &v, &lg, 4, None, Fault::CorruptCrossTerm).unwrap();
        assert!(good.max_abs_diff(&bad) > 1e-6);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let q = Tensor::from_rows(1, 1, vec![f64::NAN]);
        let one = Tensor::from_rows(1, 1, vec![1.0]);
        assert!(matches!(parallel(&q, &one, &one, &[0.0]), Err(Error::NonFinite(_))));
        assert!(chunkwise(&one, &one, &one, &[0.0], 0, None).is_err());
    }

    fn weighted(g_seed: u64, n: usize, c: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(g_seed);
        rand_t(&mut rng, n, c)
    }

    #[test]
    fn chunkwise_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (8, 4);
        let q = rand_t(&mut rng, n, d);
        let k = rand_t(&mut rng, n, d);
        let v = rand_t(&mut rng, n, d);
        let lg = Tensor::from_rows(n, 1, rand_lg(&mut rng, n));
        let r0 = GateState { s: rand_t(&mut rng, d, d), position: 0 };
        let g_out = weighted(10, n, d);
        let g_state = weighted(11, d, d);
        for b in [1, 3, 8] {
            let (_, _, saved) = chunkwise_saved(&q, &k, &v, lg.data(), b, Some(&r0)).unwrap();
            let grads = chunkwise_backward(&g_out, Some(&g_state), &saved).unwrap();
            let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, lg: &[f64], s0: &Tensor<f64>| {
                let init = GateState { s: s0.clone(), position: 0 };
                let (o, s) = chunkwise(q, k, v, lg, b, Some(&init)).unwrap();
                dot(o.data(), g_out.data()) + dot(s.s.data(), g_state.data())
            };
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let inputs = [&q, &k, &v, &lg, &r0.s];
            let analytic = [
                grads.dq.data().to_vec(),
                grads.dk.data().to_vec(),
                grads.dv.data().to_vec(),
                grads.dlog_gamma.clone(),
                grads.d_init.data().to_vec(),
            ];
            for (which, t) in inputs.iter().enumerate() {
                for e in 0..t.len() {
                    let bump = |delta: f64| {
                        let mut xs: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
                        let mut data = xs[which].data().to_vec();
                        data[e] += delta;
                        xs[which] = Tensor::new(xs[which].shape().to_vec(), data).unwrap();
                        loss(&xs[0], &xs[1], &xs[2], xs[3].data(), &xs[4])
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let rel = (analytic[which][e] - fd).abs() / (fd.abs() + 1e-8);
                    worst = worst.max(rel);
                }
            }
            assert!(worst < 1e-4, "B={b}: worst rel err {worst}");
        }
    }

    #[test]
    fn chunkwise_backward_without_saved_states_fails() {
        let one = Tensor::from_rows(2, 1, vec![1.0, 1.0]);
        let saved = ChunkwiseSaved {
            q: one.clone(),
            k: one.clone(),
            v: one.clone(),
            log_gamma: vec![0.0, 0.0],
            chunk_size: 1,
            states: Vec::new(),
        };
        assert!(matches!(
            chunkwise_backward(&one, None, &saved),
            Err(Error::MissingSaved(_))
        ));
    }

    #[test]
    fn unit_decay_gradients_equal_linear_attention() {
        // γ ≡ 1, one chunk: loss = Σ G ⊙ (tril(QKᵀ) V)
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, d) = (6, 3);
        let (q, k, v) = (rand_t(&mut rng, n, d), rand_t(&mut rng, n, d), rand_t(&mut rng, n, d));
        let g = weighted(13, n, d);
        let (_, _, saved) = chunkwise_saved(&q, &k, &v, &[0.0; 6], 8, None).unwrap();
        let grads = chunkwise_backward(&g, None, &saved).unwrap();
        let tril = Tensor::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 });
        let ga = g.matmul_t(&v).unwrap().hadamard(&tril).unwrap();
        let dq = ga.matmul(&k).unwrap();
        let dk = ga.transpose().unwrap().matmul(&q).unwrap();
        let dv = q.matmul_t(&k).unwrap().hadamard(&tril).unwrap().transpose().unwrap().matmul(&g).unwrap();
        assert!(grads.dq.max_abs_diff(&dq) <= 1e-12);
        assert!(grads.dk.max_abs_diff(&dk) <= 1e-12);
        assert!(grads.dv.max_abs_diff(&dv) <= 1e-12);
    }

    #[test]
    fn taped_parallel_gradients_match_chunkwise_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (n, d) = (20, 4);
        let leaves = vec![
            rand_t(&mut rng, n, d),
            rand_t(&mut rng, n, d),
            rand_t(&mut rng, n, d),
            Tensor::from_rows(n, 1, rand_lg(&mut rng, n)),
        ];
        let g = weighted(15, n, d);
        let grads_for = |paradigm: Paradigm| {
            let mut tape = Tape::new();
            let vars: Vec<_> = leaves.iter().map(|t| tape.leaf(t)).collect();
            let (o, _) = tape
                .gated_retention(&vars[0], &vars[1], &vars[2], &vars[3], paradigm, None)
                .unwrap();
            let gv = tape.input(&g);
            let p = tape.hadamard(&o, &gv).unwrap();
            let loss = tape.sum(&p).unwrap();
            let grads = tape.backward(loss).unwrap();
            vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
        };
        let par = grads_for(Paradigm::Parallel);
        for p in [Paradigm::Chunkwise(6), Paradigm::Recurrent] {
            for (a, b) in par.iter().zip(grads_for(p)) {
                assert!(a.max_abs_diff(&b) <= 1e-8);
            }
        }
    }

    #[test]
    fn parallel_sum_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let leaves = vec![
            rand_t(&mut rng, 4, 4),
            rand_t(&mut rng, 4, 4),
            rand_t(&mut rng, 4, 4),
            Tensor::from_rows(4, 1, rand_lg(&mut rng, 4)),
        ];
        let r = grad_check(
            &leaves,
            |t, v| {
                let (o, _) = t.gated_retention(&v[0], &v[1], &v[2], &v[3], Paradigm::Parallel, None)?;
                t.sum(&o)
            },
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    fn mhgr_inputs(seed: u64, n: usize, d: usize, heads: usize) -> (Tensor<f64>, GretWeights<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        let x = rand_t(&mut rng, n, d);
        let w = GretWeights {
            w_q: rand_t(&mut rng, d, d).scale(s),
            w_k: rand_t(&mut rng, d, d).scale(s),
            w_v: rand_t(&mut rng, d, d).scale(s),
            w_gamma: rand_t(&mut rng, d, heads).scale(s),
            w_g: rand_t(&mut rng, d, d).scale(s),
            w_o: rand_t(&mut rng, d, d).scale(s),
        };
        (x, w)
    }

    #[test]
    fn mhgr_paradigm_swap_is_invisible() {
        let (x, w) = mhgr_inputs(17, 37, 16, 4);
        let settings = MhgrSettings { n_heads: 4, d_head: 4, tau: 16.0, group_norm: true, group_norm_eps: 1e-6 };
        let mut outs = Vec::new();
        for p in [Paradigm::Parallel, Paradigm::Chunkwise(5), Paradigm::Recurrent] {
            let mut states = Vec::new();
            outs.push(mhgr_forward(&mut Eager, &x, &w, &settings, None, p, &mut states).unwrap());
            assert_eq!(states.len(), 4);
        }
        assert!(outs[0].max_abs_diff(&outs[1]) <= 1e-10);
        assert!(outs[0].max_abs_diff(&outs[2]) <= 1e-10);
    }

    #[test]
    fn mhgr_single_head_degenerates_to_gret() {
        let (x, mut w) = mhgr_inputs(18, 6, 4, 1);
        w.w_o = Tensor::eye(4);
        // a large positive gate saturates the sigmoid, so swish(z) = z·(1 - O(e^-z))
        w.w_g = Tensor::eye(4).scale(1.0);
        let x = x.map(|v| v.abs() * 40.0 + 40.0);
        let settings = MhgrSettings { n_heads: 1, d_head: 4, tau: 16.0, group_norm: false, group_norm_eps: 1e-6 };
        let mut states = Vec::new();
        let out = mhgr_forward(&mut Eager, &x, &w, &settings, None, Paradigm::Parallel, &mut states).unwrap();
        let q = x.matmul(&w.w_q).unwrap().scale(0.5);
        let k = x.matmul(&w.w_k).unwrap();
        let v = x.matmul(&w.w_v).unwrap();
        let lg = decay_from_input(&x, &w.w_gamma, 16.0).unwrap();
        let single = parallel(&q, &k, &v, lg.head(0)).unwrap();
        let want = x.hadamard(&single).unwrap();
        assert!(out.max_abs_diff(&want) <= 1e-10 * want.max_abs());
    }

    #[test]
    fn group_norm_output_is_standardized_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let o = rand_t(&mut rng, 5, 8).scale(3.0);
        let y = o.standardize_rows(1e-6).unwrap();
        for i in 0..5 {
            let row = y.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
