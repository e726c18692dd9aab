//! Inference runtime: early-exit prefill, single-token decode and the global
//! key/value cache.
//!
//! Prefill runs the self-decoder over every prompt token but the
//! cross-decoder only over the last one, since the shared cache is complete
//! as soon as the self-decoder finishes.

pub mod cost;

pub use cost::{cost_report, supported_tokens, CostReport};

use crate::error::{Error, Result};
use crate::model::{
    check_tokens, cross_decoder_forward, fresh_states, kv_project, logits, self_decoder_forward,
    LayerState, ModelConfig, Params,
};
use crate::tensor::{Eager, Paradigm, Real, Tensor};

/// Append-only projected key/value rows shared by every cross-decoder layer.
#[derive(Debug, Clone)]
pub struct GlobalKVCache<T> {
    k_hat: Tensor<T>,
    v_hat: Tensor<T>,
    max_len: usize,
}

impl<T: Real> GlobalKVCache<T> {
    pub fn new(d_kv: usize, initial_capacity: usize, max_len: usize) -> Self {
        let mut k_hat = Tensor::zeros(&[0, d_kv]);
        let mut v_hat = Tensor::zeros(&[0, d_kv]);
        let cap = initial_capacity.clamp(1, max_len.max(1));
        k_hat.append_rows(&[], cap);
        v_hat.append_rows(&[], cap);
        Self {
            k_hat,
            v_hat,
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.k_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.k_hat.cols()
    }

    /// Live values (keys plus values); spare capacity is not counted.
    pub fn values(&self) -> usize {
        2 * self.len() * self.width()
    }

    pub fn capacity(&self) -> usize {
        self.k_hat.capacity_rows()
    }

    pub fn k_hat(&self) -> &Tensor<T> {
        &self.k_hat
    }

    pub fn v_hat(&self) -> &Tensor<T> {
        &self.v_hat
    }

    /// Appends rows, doubling capacity when full.
    pub fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        if k.shape() != v.shape() || k.cols() != self.width() {
            return Err(Error::Shape {
                op: "kv cache append",
                lhs: k.shape().to_vec(),
                rhs: vec![self.width()],
            });
        }
        let len = self.len() + k.rows();
        if len > self.max_len {
            return Err(Error::TooLong {
                len,
                max: self.max_len,
            });
        }
        let mut cap = self.capacity().max(1);
        while cap < len {
            cap *= 2;
        }
        let cap = cap.min(self.max_len).max(len);
        self.k_hat.append_rows(k.data(), cap);
        self.v_hat.append_rows(v.data(), cap);
        Ok(())
    }
}

/// Layer-token executions, split by decoder half.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkCounters {
    pub self_layer_tokens: usize,
    pub cross_layer_tokens: usize,
}

impl WorkCounters {
    pub fn total(&self) -> usize {
        self.self_layer_tokens + self.cross_layer_tokens
    }
}

/// Per-sequence inference state over shared parameters.
#[derive(Debug, Clone)]
pub struct EngineState<'p, T: Real> {
    params: &'p Params<Tensor<T>>,
    cfg: &'p ModelConfig,
    position: usize,
    states: Vec<LayerState<T>>,
    cache: GlobalKVCache<T>,
    prefill_chunk: usize,
    counters: WorkCounters,
}

impl<'p, T: Real> EngineState<'p, T> {
    /// Empty state. `prefill_chunk` is the chunk size used by prefill.
    pub fn new(params: &'p Params<Tensor<T>>, cfg: &'p ModelConfig, prefill_chunk: usize) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(cfg)?;
        if prefill_chunk == 0 {
            return Err(Error::InvalidArgument("prefill chunk must be >= 1".into()));
        }
        Ok(Self {
            params,
            cfg,
            position: 0,
            states: fresh_states(cfg),
            cache: GlobalKVCache::new(cfg.d_kv(), 64, cfg.max_len),
            prefill_chunk,
            counters: WorkCounters::default(),
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn cache(&self) -> &GlobalKVCache<T> {
        &self.cache
    }

    pub fn layer_states(&self) -> &[LayerState<T>] {
        &self.states
    }

    pub fn counters(&self) -> WorkCounters {
        self.counters
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Global cache values plus every layer's constant state.
    pub fn cache_values(&self) -> usize {
        self.cache.values() + self.states.iter().map(|s| s.values(self.cfg)).sum::<usize>()
    }

    /// Runs `tokens` through the self-decoder, extends the cache, and
    /// cross-decodes only the last position. Returns its logits `1 × vocab`.
    fn advance(&mut self, tokens: &[usize], paradigm: Paradigm) -> Result<Tensor<T>> {
        check_tokens(tokens, self.cfg)?;
        let n = tokens.len();
        if self.position + n > self.cfg.max_len {
            return Err(Error::TooLong {
                len: self.position + n,
                max: self.cfg.max_len,
            });
        }
        let half = self.cfg.half_layers();
        let (p, cfg) = (self.params, self.cfg);
        let ops = &mut Eager;
        let x = p.embed.gather_rows(tokens)?;
        let m = self_decoder_forward(ops, &x, p, cfg, paradigm, self.position, &mut self.states)?;
        let (k, v) = kv_project(ops, &m, p, cfg, self.position)?;
        self.cache.append(&k, &v)?;
        self.counters.self_layer_tokens += n * half;

        let last = m.slice_rows(n - 1, 1)?;
        let query = self.position + n - 1;
        let out = cross_decoder_forward(
            ops,
            &last,
            self.cache.k_hat(),
            self.cache.v_hat(),
            p,
            cfg,
            query,
        )?;
        debug_assert!(out.kv_ids.iter().all(|&id| id == self.cache.k_hat().buffer_id()));
        self.counters.cross_layer_tokens += half;
        self.position += n;
        logits(ops, &out.x, p, cfg)?.ensure_finite("engine logits")
    }

    /// Encodes a prompt with the chunkwise self-decoder.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        self.advance(tokens, Paradigm::Chunkwise(self.prefill_chunk))
    }

    /// One recurrent step for `token`; returns its logits `1 × vocab`.
    pub fn decode_step(&mut self, token: usize) -> Result<Tensor<T>> {
        if self.position == 0 {
            return Err(Error::InvalidArgument("decode before prefill".into()));
        }
        self.advance(&[token], Paradigm::Recurrent)
    }
}

/// Prefills `tokens` into a fresh state using the config's chunk size.
pub fn prefill<'p, T: Real>(
    tokens: &[usize],
    params: &'p Params<Tensor<T>>,
    cfg: &'p ModelConfig,
) -> Result<(EngineState<'p, T>, Tensor<T>)> {
    let mut st = EngineState::new(params, cfg, cfg.chunk)?;
    let logits = st.prefill(tokens)?;
    Ok((st, logits))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` by `max_new` tokens.
pub fn generate<T: Real>(
    prompt: &[usize],
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    max_new: usize,
    prefill_chunk: usize,
) -> Result<Vec<usize>> {
    let mut st = EngineState::new(params, cfg, prefill_chunk)?;
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        check_tokens(prompt, cfg)?;
        return Ok(out);
    }
    let mut logits = st.prefill(prompt)?;
    loop {
        let next = argmax(logits.row(0));
        out.push(next);
        if out.len() == max_new {
            return Ok(out);
        }
        logits = st.decode_step(next)?;
    }
}
