//! Single-process simulation of chunk parallelism over `P` virtual devices.
//!
//! Each device owns a contiguous slice of the sequence. Self-decoder state
//! flows from each device to its successor once per layer; the projected
//! key/value rows are all-gathered once; each device then runs the
//! cross-decoder on its own queries against the gathered cache.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_tokens, cross_decoder_forward, fresh_states, kv_project, logits, self_decoder_forward,
    LayerState, ModelConfig, Params,
};
use crate::tensor::{Eager, Paradigm, Real, Tensor};

/// Contiguous, ordered token ranges, one per device (0-based, half-open).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub n: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn devices(&self) -> usize {
        self.ranges.len()
    }

    /// Inclusive 1-based `(first, last)` token positions per device.
    pub fn one_based(&self) -> Vec<(usize, usize)> {
        self.ranges.iter().map(|r| (r.start + 1, r.end)).collect()
    }
}

/// Near-equal split of `n` tokens over `p` devices; earlier devices take the
/// remainder.
pub fn plan_chunks(n: usize, p: usize) -> Result<ChunkPlan> {
    if p == 0 || p > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} tokens over {p} devices"
        )));
    }
    let (base, extra) = (n / p, n % p);
    let mut ranges = Vec::with_capacity(p);
    let mut start = 0;
    for d in 0..p {
        let len = base + usize::from(d < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(ChunkPlan { n, ranges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StateHandoff,
    KvAllgather,
}

/// One communication event. The all-gather is collective, so it has no
/// layer, source or destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: EventKind,
    pub layer: Option<usize>,
    pub src: Option<usize>,
    pub dst: Option<usize>,
    pub values: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommTrace {
    pub events: Vec<CommEvent>,
}

impl CommTrace {
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { events })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub handoff_count: usize,
    pub allgather_count: usize,
    pub total_values_moved: usize,
}

pub fn comm_stats(trace: &CommTrace) -> CommStats {
    let mut s = CommStats::default();
    for e in &trace.events {
        match e.kind {
            EventKind::StateHandoff => s.handoff_count += 1,
            EventKind::KvAllgather => s.allgather_count += 1,
        }
        s.total_values_moved += e.values;
    }
    s
}

fn handoff_values<T: Real>(state: &LayerState<T>, cfg: &ModelConfig) -> usize {
    match state {
        LayerState::Gret(_) => cfg.n_heads * cfg.d_head * cfg.d_head,
        // only the rows actually held in the window travel
        LayerState::Swa(c) => 2 * c.len() * c.width(),
    }
}

/// Result of [`simulate_forward`].
pub struct SimOutput<T> {
    /// Logits for every position, `n × vocab`.
    pub logits: Tensor<T>,
    pub trace: CommTrace,
}

/// Runs the forward pass split by `plan`. With `threads`, the per-device
/// cross-decoder phase runs on scoped threads; results are identical.
pub fn simulate_forward<T: Real>(
    plan: &ChunkPlan,
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    tokens: &[usize],
    threads: bool,
) -> Result<SimOutput<T>> {
    check_tokens(tokens, cfg)?;
    if plan.n != tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} tokens, got {}",
            plan.n,
            tokens.len()
        )));
    }
    let mut trace = CommTrace::default();
    let paradigm = Paradigm::Chunkwise(cfg.chunk);

    // self-decoder: devices in order, per-layer state handed to the successor
    let mut states = fresh_states::<T>(cfg);
    let mut local_m = Vec::with_capacity(plan.devices());
    let mut local_k = Vec::with_capacity(plan.devices());
    let mut local_v = Vec::with_capacity(plan.devices());
    for (dev, range) in plan.ranges.iter().enumerate() {
        if dev > 0 {
            for (layer, s) in states.iter().enumerate() {
                trace.events.push(CommEvent {
                    kind: EventKind::StateHandoff,
                    layer: Some(layer),
                    src: Some(dev - 1),
                    dst: Some(dev),
                    values: handoff_values(s, cfg),
                });
            }
        }
        let mut device_states = states.clone();
        let x = params.embed.gather_rows(&tokens[range.clone()])?;
        let m = self_decoder_forward(
            &mut Eager,
            &x,
            params,
            cfg,
            paradigm,
            range.start,
            &mut device_states,
        )?;
        let (k, v) = kv_project(&mut Eager, &m, params, cfg, range.start)?;
        states = device_states;
        local_m.push(m);
        local_k.push(k);
        local_v.push(v);
    }

    // one all-gather: each device receives every other device's rows
    let n = tokens.len();
    trace.events.push(CommEvent {
        kind: EventKind::KvAllgather,
        layer: None,
        src: None,
        dst: None,
        values: (plan.devices() - 1) * n * 2 * cfg.d_kv(),
    });
    let k_all = Tensor::concat_rows(&local_k)?;
    let v_all = Tensor::concat_rows(&local_v)?;

    let cross = |dev: usize| -> Result<Tensor<T>> {
        let out = cross_decoder_forward(
            &mut Eager,
            &local_m[dev],
            &k_all,
            &v_all,
            params,
            cfg,
            plan.ranges[dev].start,
        )?;
        logits(&mut Eager, &out.x, params, cfg)
    };
    let parts: Vec<Tensor<T>> = if threads {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..plan.devices())
                .map(|d| s.spawn(move || cross(d)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("device thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        (0..plan.devices()).map(cross).collect::<Result<_>>()?
    };
    Ok(SimOutput {
        logits: Tensor::concat_rows(&parts)?,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_full, init_params};

    fn tokens(n: usize, vocab: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 13 + 5) % vocab).collect()
    }

    #[test]
    fn plan_examples() {
        assert_eq!(plan_chunks(10, 1).unwrap().one_based(), vec![(1, 10)]);
        assert_eq!(plan_chunks(10, 2).unwrap().one_based(), vec![(1, 5), (6, 10)]);
        assert_eq!(
            plan_chunks(7, 3).unwrap().one_based(),
            vec![(1, 3), (4, 5), (6, 7)]
        );
        assert!(plan_chunks(3, 4).is_err());
        assert!(plan_chunks(3, 0).is_err());
    }

    #[test]
    fn empty_trace_stats_are_zero() {
        assert_eq!(comm_stats(&CommTrace::default()), CommStats::default());
    }

    #[test]
    fn single_device_is_exact() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 1);
        let t = tokens(20, cfg.vocab_size);
        let out = simulate_forward(&plan_chunks(20, 1).unwrap(), &p, &cfg, &t, false).unwrap();
        let full = forward_full(&t, &p, &cfg).unwrap();
        assert!(out.logits.max_abs_diff(&full) <= 1e-10);
        let s = comm_stats(&out.trace);
        assert_eq!((s.handoff_count, s.allgather_count, s.total_values_moved), (0, 1, 0));
    }

    #[test]
    fn two_devices_match_and_count() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 2);
        let t = tokens(64, cfg.vocab_size);
        let full = forward_full(&t, &p, &cfg).unwrap();
        let out = simulate_forward(&plan_chunks(64, 2).unwrap(), &p, &cfg, &t, true).unwrap();
        assert!(out.logits.max_abs_diff(&full) <= 1e-10);
        let s = comm_stats(&out.trace);
        assert_eq!((s.handoff_count, s.allgather_count), (2, 1));
        for e in out.trace.events.iter().filter(|e| e.kind == EventKind::StateHandoff) {
            assert_eq!(e.values, 4 * 8 * 8);
            assert_eq!(e.dst.unwrap(), e.src.unwrap() + 1);
        }
    }

    #[test]
    fn four_devices_eight_layers() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_layers = 8;
        let p = init_params::<f64>(&cfg, 3);
        let t = tokens(30, cfg.vocab_size);
        let out = simulate_forward(&plan_chunks(30, 4).unwrap(), &p, &cfg, &t, false).unwrap();
        let s = comm_stats(&out.trace);
        assert_eq!((s.handoff_count, s.allgather_count), (12, 1));
    }

    #[test]
    fn swa_handoffs_carry_window_rows() {
        let cfg = ModelConfig::tiny_swa();
        let p = init_params::<f64>(&cfg, 4);
        let t = tokens(30, cfg.vocab_size);
        let plan = plan_chunks(30, 3).unwrap();
        let out = simulate_forward(&plan, &p, &cfg, &t, false).unwrap();
        assert!(out.logits.max_abs_diff(&forward_full(&t, &p, &cfg).unwrap()) <= 1e-10);
        for e in out.trace.events.iter().filter(|e| e.kind == EventKind::StateHandoff) {
            assert_eq!(e.values, 8 * 16 * 2);
        }
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let cfg = ModelConfig::tiny();
        let p = init_params::<f64>(&cfg, 5);
        let t = tokens(9, cfg.vocab_size);
        let out = simulate_forward(&plan_chunks(9, 3).unwrap(), &p, &cfg, &t, false).unwrap();
        let text = out.trace.to_jsonl();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["dst", "kind", "layer", "src", "values"]);
        assert_eq!(first["kind"], "state_handoff");
        assert_eq!(CommTrace::from_jsonl(&text).unwrap(), out.trace);
        assert!(text.contains("\"kind\":\"kv_allgather\",\"layer\":null,\"src\":null,\"dst\":null"));
    }
}
