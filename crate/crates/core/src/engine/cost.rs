//! Closed-form cache and attention cost accounting for a config, against a
//! Transformer baseline with the same depth and key/value width.
//!
//! FLOPs are twice the multiply-accumulates of attention scores and value
//! aggregation (retention state updates included). FFN FLOPs are separate.

use crate::model::{ModelConfig, SelfAttnKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub n: usize,
    pub precision_bytes: usize,
    /// `2·n·d_kv`, the single shared cache.
    pub global_cache_values: usize,
    /// `(L/2)·state_values`, constant in `n`.
    pub state_values: usize,
    /// Global cache plus self-decoder state.
    pub kv_values_yoco: usize,
    /// `2·n·d_kv·L`.
    pub kv_values_transformer: usize,
    pub kv_bytes_yoco: usize,
    pub kv_bytes_transformer: usize,
    pub attn_flops_prefill_yoco: u128,
    pub attn_flops_prefill_transformer: u128,
    pub ffn_flops_prefill_yoco: u128,
    pub ffn_flops_prefill_transformer: u128,
    /// Layer-token executions during prefill.
    pub layers_prefilled_yoco: usize,
    pub layers_prefilled_transformer: usize,
}

/// Self-decoder attention MACs for one layer over `n` tokens.
fn self_layer_macs(cfg: &ModelConfig, n: usize) -> u128 {
    let (n, d, dh) = (n as u128, cfg.d_model as u128, cfg.d_head as u128);
    match cfg.self_attn_kind {
        SelfAttnKind::Gret => {
            // inner-chunk scores and values, then state update and readout
            let b = cfg.chunk as u128;
            let full = n / b;
            let rem = n % b;
            let sq = full * b * b + rem * rem;
            2 * sq * d + 2 * n * d * dh
        }
        SelfAttnKind::Swa => {
            let c = cfg.window as u128;
            // Σ_i min(i+1, C)
            let visible = if n <= c {
                n * (n + 1) / 2
            } else {
                c * (c + 1) / 2 + (n - c) * c
            };
            2 * visible * d
        }
    }
}

pub fn cost_report(cfg: &ModelConfig, n: usize, precision_bytes: usize) -> CostReport {
    let l = cfg.n_layers;
    let half = cfg.half_layers();
    let dkv = cfg.d_kv();
    let global = 2 * n * dkv;
    let state = half * cfg.state_values();
    let transformer = 2 * n * dkv * l;

    let (nn, d, lw) = (n as u128, cfg.d_model as u128, l as u128);
    let hw = half as u128;
    let cross_one_query = 2 * nn * d;
    let yoco_macs = hw * self_layer_macs(cfg, n) + hw * cross_one_query;
    let transformer_flops = 4 * lw * nn * nn * d;
    let ffn_per_token = 6 * d * cfg.ffn_dim as u128;

    CostReport {
        n,
        precision_bytes,
        global_cache_values: global,
        state_values: state,
        kv_values_yoco: global + state,
        kv_values_transformer: transformer,
        kv_bytes_yoco: (global + state) * precision_bytes,
        kv_bytes_transformer: transformer * precision_bytes,
        attn_flops_prefill_yoco: 2 * yoco_macs,
        attn_flops_prefill_transformer: transformer_flops,
        ffn_flops_prefill_yoco: ffn_per_token * (hw * nn + hw),
        ffn_flops_prefill_transformer: ffn_per_token * lw * nn,
        layers_prefilled_yoco: n * half + half,
        layers_prefilled_transformer: n * l,
    }
}

/// Longest sequence whose cache fits in `budget_bytes` at `bytes_per_value`,
/// as `(yoco, transformer)`.
pub fn supported_tokens(cfg: &ModelConfig, budget_bytes: usize, bytes_per_value: usize) -> (usize, usize) {
    let values = budget_bytes / bytes_per_value;
    let per_token = 2 * cfg.d_kv();
    let fixed = cfg.half_layers() * cfg.state_values();
    let yoco = values.saturating_sub(fixed) / per_token;
    let transformer = values / (per_token * cfg.n_layers);
    (yoco, transformer)
}
