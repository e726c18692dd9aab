//! The decoder-decoder: self-decoder blocks over efficient self-attention, one
//! projected key/value cache, and cross-decoder blocks reading that cache.
//!
//! Every forward function is generic over [`Ops`], so the same code runs
//! eagerly on tensors and on a gradient tape.

pub mod config;
pub mod io;
pub mod params;
pub mod rope;

pub use config::{ModelConfig, SelfAttnKind};
pub use params::{
    init_params, layout, non_embedding_count, param_count, CrossLayer, Mixer, Params, SelfLayer,
    SwiGlu,
};
pub use rope::{rope_apply, RotaryTables};

use crate::error::{Error, Result};
use crate::gret::{mhgr_forward, GateState, MhgrSettings};
use crate::swa::{swa_layer, SwaRope, SwaSettings, WindowCache};
use crate::tensor::{AttnGeometry, Eager, Ops, Paradigm, Real, Tensor};

/// Constant-size state carried by one self-decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerState<T> {
    /// One state per head.
    Gret(Vec<GateState<T>>),
    Swa(WindowCache<T>),
}

impl<T: Real> LayerState<T> {
    pub fn fresh(cfg: &ModelConfig) -> Self {
        match cfg.self_attn_kind {
            SelfAttnKind::Gret => LayerState::Gret(Vec::new()),
            SelfAttnKind::Swa => LayerState::Swa(WindowCache::new(cfg.window, cfg.d_kv())),
        }
    }

    /// Values this state occupies (preallocated capacity for windows).
    pub fn values(&self, cfg: &ModelConfig) -> usize {
        match self {
            LayerState::Gret(_) => cfg.n_heads * cfg.d_head * cfg.d_head,
            LayerState::Swa(c) => c.state_values(),
        }
    }

    pub fn gate_states(&self) -> Option<&[GateState<T>]> {
        match self {
            LayerState::Gret(s) => Some(s),
            LayerState::Swa(_) => None,
        }
    }
}

pub fn fresh_states<T: Real>(cfg: &ModelConfig) -> Vec<LayerState<T>> {
    (0..cfg.half_layers()).map(|_| LayerState::fresh(cfg)).collect()
}

fn mhgr_settings(cfg: &ModelConfig) -> MhgrSettings {
    MhgrSettings {
        n_heads: cfg.n_heads,
        d_head: cfg.d_head,
        tau: cfg.tau,
        group_norm: cfg.group_norm,
        group_norm_eps: 1e-6,
    }
}

fn swa_settings(cfg: &ModelConfig) -> SwaSettings {
    SwaSettings {
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        d_head: cfg.d_head,
        window: cfg.window,
    }
}

fn rows<T: Real, O: Ops<T>>(ops: &O, x: &O::V) -> usize {
    ops.value(x).rows()
}

/// `(swish(h W_G) ⊙ h W_1) W_2` on `h = RMSNorm(x)`.
fn swiglu<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    gain: &O::V,
    w: &SwiGlu<O::V>,
    eps: T,
) -> Result<O::V> {
    let h = ops.rmsnorm(x, gain, eps)?;
    let g = ops.matmul(&h, &w.w_g)?;
    let g = ops.swish(&g)?;
    let u = ops.matmul(&h, &w.w_1)?;
    let gu = ops.hadamard(&g, &u)?;
    ops.matmul(&gu, &w.w_2)
}

/// Runs the self-decoder over rows at absolute positions
/// `start_pos..start_pos+n`, continuing from `states` (use [`fresh_states`]
/// at the start of a sequence). Returns `M` and leaves the updated states.
pub fn self_decoder_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    params: &Params<O::V>,
    cfg: &ModelConfig,
    paradigm: Paradigm,
    start_pos: usize,
    states: &mut [LayerState<T>],
) -> Result<O::V> {
    if states.len() != params.self_layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layer states for {} self-decoder layers",
            states.len(),
            params.self_layers.len()
        )));
    }
    let n = rows(ops, x);
    let eps = T::of(cfg.rmsnorm_eps);
    let q_rope = RotaryTables::new(cfg.rope_theta, cfg.d_head, cfg.n_heads, start_pos, n)?;
    let k_rope = match cfg.self_attn_kind {
        SelfAttnKind::Swa => Some(RotaryTables::new(
            cfg.rope_theta,
            cfg.d_head,
            cfg.n_kv_heads,
            start_pos,
            n,
        )?),
        SelfAttnKind::Gret => None,
    };
    let mut x = x.clone();
    for (layer, state) in params.self_layers.iter().zip(states.iter_mut()) {
        let h = ops.rmsnorm(&x, &layer.attn_norm, eps)?;
        let y = match (&layer.mixer, state) {
            (Mixer::Gret(w), LayerState::Gret(s)) => mhgr_forward(
                ops,
                &h,
                w,
                &mhgr_settings(cfg),
                Some(&q_rope),
                paradigm,
                s,
            )?,
            (Mixer::Swa(w), LayerState::Swa(c)) => swa_layer(
                ops,
                &h,
                w,
                &swa_settings(cfg),
                Some(SwaRope {
                    q: &q_rope,
                    k: k_rope.as_ref().expect("built for swa"),
                }),
                start_pos,
                Some(c),
                paradigm,
            )?,
            _ => {
                return Err(Error::InvalidArgument(
                    "layer state does not match the self-attention kind".into(),
                ))
            }
        };
        x = ops.add(&x, &y)?;
        let f = swiglu(ops, &x, &layer.ffn_norm, &layer.ffn, eps)?;
        x = ops.add(&x, &f)?;
    }
    Ok(x)
}

/// `K̂ = RMSNorm(M) W_K` (rotated), `V̂ = RMSNorm(M) W_V`, for rows at
/// positions `start_pos..`.
pub fn kv_project<T: Real, O: Ops<T>>(
    ops: &mut O,
    m: &O::V,
    params: &Params<O::V>,
    cfg: &ModelConfig,
    start_pos: usize,
) -> Result<(O::V, O::V)> {
    let n = rows(ops, m);
    let h = ops.rmsnorm(m, &params.kv_norm, T::of(cfg.rmsnorm_eps))?;
    let k = ops.matmul(&h, &params.w_k)?;
    let v = ops.matmul(&h, &params.w_v)?;
    let r = RotaryTables::new(cfg.rope_theta, cfg.d_head, cfg.n_kv_heads, start_pos, n)?;
    let k = ops.rotate_pairs(&k, &r.cos, &r.sin)?;
    Ok((k, v))
}

/// Output of [`cross_decoder_forward`].
pub struct CrossOutput<V> {
    pub x: V,
    /// Storage identity of the key buffer each layer read.
    pub kv_ids: Vec<usize>,
}

/// Runs the cross-decoder on query rows at positions
/// `query_start..query_start+q` against the shared cache rows `0..n`.
pub fn cross_decoder_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    k_hat: &O::V,
    v_hat: &O::V,
    params: &Params<O::V>,
    cfg: &ModelConfig,
    query_start: usize,
) -> Result<CrossOutput<O::V>> {
    let q = rows(ops, x);
    let n = rows(ops, k_hat);
    if q > 0 && query_start + q > n {
        return Err(Error::Causal {
            query: query_start + q - 1,
            cached: n,
        });
    }
    let eps = T::of(cfg.rmsnorm_eps);
    let rope = RotaryTables::new(cfg.rope_theta, cfg.d_head, cfg.n_heads, query_start, q)?;
    let geom = AttnGeometry {
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        d_head: cfg.d_head,
        q_start: query_start,
        k_start: 0,
        window: None,
    };
    let mut x = x.clone();
    let mut kv_ids = Vec::with_capacity(params.cross_layers.len());
    for layer in &params.cross_layers {
        let h = ops.rmsnorm(&x, &layer.attn_norm, eps)?;
        let qh = ops.matmul(&h, &layer.w_q)?;
        let qh = ops.rotate_pairs(&qh, &rope.cos, &rope.sin)?;
        kv_ids.push(ops.id(k_hat));
        let a = ops.attention(&qh, k_hat, v_hat, &geom)?;
        let a = ops.matmul(&a, &layer.w_o)?;
        x = ops.add(&x, &a)?;
        let f = swiglu(ops, &x, &layer.ffn_norm, &layer.ffn, eps)?;
        x = ops.add(&x, &f)?;
    }
    Ok(CrossOutput { x, kv_ids })
}

/// Final norm and classifier.
pub fn logits<T: Real, O: Ops<T>>(
    ops: &mut O,
    x: &O::V,
    params: &Params<O::V>,
    cfg: &ModelConfig,
) -> Result<O::V> {
    let h = ops.rmsnorm(x, &params.final_norm, T::of(cfg.rmsnorm_eps))?;
    match params.classifier_or_embed() {
        (w, false) => ops.matmul(&h, w),
        (e, true) => ops.matmul_t(&h, e),
    }
}

pub fn check_tokens(tokens: &[usize], cfg: &ModelConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::TooLong {
            len: tokens.len(),
            max: cfg.max_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfVocab {
            token: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Logits for every position, self-decoder in the given paradigm.
pub fn forward_full_with<T: Real, O: Ops<T>>(
    ops: &mut O,
    tokens: &[usize],
    params: &Params<O::V>,
    cfg: &ModelConfig,
    paradigm: Paradigm,
) -> Result<O::V> {
    check_tokens(tokens, cfg)?;
    let x = ops.gather_rows(&params.embed, tokens)?;
    let mut states = fresh_states(cfg);
    let m = self_decoder_forward(ops, &x, params, cfg, paradigm, 0, &mut states)?;
    let (k, v) = kv_project(ops, &m, params, cfg, 0)?;
    let out = cross_decoder_forward(ops, &m, &k, &v, params, cfg, 0)?;
    let y = logits(ops, &out.x, params, cfg)?;
    if !ops.value(&y).is_finite() {
        return Err(Error::NonFinite("forward_full"));
    }
    Ok(y)
}

/// Logits `n × vocab` for every position, computed with the parallel
/// self-decoder.
pub fn forward_full<T: Real>(
    tokens: &[usize],
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    forward_full_with(&mut Eager, tokens, params, cfg, Paradigm::Parallel)
}
