use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::rope;

/// Efficient self-attention used by the self-decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfAttnKind {
    Gret,
    Swa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Total layers; the first half are self-decoder blocks.
    #[serde(alias = "L")]
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub self_attn_kind: SelfAttnKind,
    /// Sliding window `C` (SWA only).
    #[serde(default = "default_window")]
    pub window: usize,
    /// Prefill chunk size `B`.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Per-head normalization of retention outputs.
    #[serde(default = "default_true")]
    pub group_norm: bool,
}

fn default_window() -> usize {
    64
}
fn default_chunk() -> usize {
    256
}
fn default_tau() -> f64 {
    16.0
}
fn default_theta() -> f64 {
    rope::THETA_DEFAULT
}
fn default_eps() -> f64 {
    1e-6
}
fn default_max_len() -> usize {
    1 << 20
}
fn default_true() -> bool {
    true
}

/// Scaling-curve sizes: (name, hidden, layers, heads).
const SCALING: [(&str, usize, usize, usize); 7] = [
    ("160m", 768, 12, 12),
    ("400m", 1024, 24, 16),
    ("830m", 1536, 24, 12),
    ("1.4b", 2048, 24, 16),
    ("2.7b", 2560, 32, 20),
    ("6.8b", 4096, 32, 32),
    ("13b", 5120, 40, 40),
];

impl ModelConfig {
    /// Small gated-retention model for tests: 4 layers, width 32, vocab 97.
    pub fn tiny() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 8,
            ffn_dim: 88,
            vocab_size: 97,
            self_attn_kind: SelfAttnKind::Gret,
            window: 16,
            chunk: 16,
            tau: default_tau(),
            rope_theta: default_theta(),
            rmsnorm_eps: default_eps(),
            tie_embeddings: false,
            max_len: 4096,
            group_norm: true,
        }
    }

    pub fn tiny_swa() -> Self {
        Self {
            self_attn_kind: SelfAttnKind::Swa,
            window: 8,
            ..Self::tiny()
        }
    }

    /// 26 layers, hidden 3072, FFN 8192, 24 heads, 8 key-value heads.
    pub fn yoco_3b() -> Self {
        Self {
            n_layers: 26,
            d_model: 3072,
            n_heads: 24,
            n_kv_heads: 8,
            d_head: 128,
            ffn_dim: 8192,
            vocab_size: 100_288,
            self_attn_kind: SelfAttnKind::Gret,
            window: 1024,
            chunk: 256,
            tau: default_tau(),
            rope_theta: default_theta(),
            rmsnorm_eps: default_eps(),
            tie_embeddings: false,
            max_len: 1 << 20,
            group_norm: true,
        }
    }

    /// 80 layers, hidden 8192, 64 heads, 8 key-value heads.
    pub fn yoco_65b() -> Self {
        Self {
            n_layers: 80,
            d_model: 8192,
            n_heads: 64,
            n_kv_heads: 8,
            d_head: 128,
            ffn_dim: 22016,
            vocab_size: 100_288,
            ..Self::yoco_3b()
        }
    }

    /// Looks up a named preset. Scaling sizes use `3d` FFN and full KV heads;
    /// `-640k`, `-5m`, `-80m` suffixes select the extended rope bases.
    pub fn preset(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let (base, theta) = match lower.rsplit_once('-') {
            Some((b, "640k")) => (b, rope::THETA_640K),
            Some((b, "5m")) => (b, rope::THETA_5M),
            Some((b, "80m")) => (b, rope::THETA_80M),
            _ => (lower.as_str(), rope::THETA_DEFAULT),
        };
        let mut cfg = match base {
            "tiny" => Self::tiny(),
            "tiny-swa" => Self::tiny_swa(),
            "3b" | "yoco-3b" => Self::yoco_3b(),
            "65b" | "yoco-65b" => Self::yoco_65b(),
            other => {
                let (_, hidden, layers, heads) = SCALING
                    .iter()
                    .find(|(n, ..)| *n == other)
                    .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
                Self {
                    n_layers: *layers,
                    d_model: *hidden,
                    n_heads: *heads,
                    n_kv_heads: *heads,
                    d_head: hidden / heads,
                    ffn_dim: 3 * hidden,
                    ..Self::yoco_3b()
                }
            }
        };
        cfg.rope_theta = theta;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset_names() -> Vec<String> {
        let mut names: Vec<String> = ["tiny", "tiny-swa", "3b", "65b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(SCALING.iter().map(|(n, ..)| n.to_string()));
        names
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return fail(format!("n_layers must be even and positive, got {}", self.n_layers));
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} must be a positive multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_head == 0 || self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} must equal n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head % 2 != 0 {
            return fail(format!("d_head {} must be even for rotary embedding", self.d_head));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 {
            return fail("ffn_dim and vocab_size must be positive".into());
        }
        if self.window == 0 || self.chunk == 0 || self.max_len == 0 {
            return fail("window, chunk and max_len must be positive".into());
        }
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return fail(format!("tau must be finite and >= 1, got {}", self.tau));
        }
        if !(self.rope_theta > 1.0) || !self.rope_theta.is_finite() {
            return fail(format!("rope_theta must be finite and > 1, got {}", self.rope_theta));
        }
        if !(self.rmsnorm_eps > 0.0) || !self.rmsnorm_eps.is_finite() {
            return fail(format!("rmsnorm_eps must be positive, got {}", self.rmsnorm_eps));
        }
        Ok(())
    }

    pub fn half_layers(&self) -> usize {
        self.n_layers / 2
    }

    /// Width of the global key (or value) cache rows.
    pub fn d_kv(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Constant per-layer self-decoder state size.
    pub fn state_values(&self) -> usize {
        match self.self_attn_kind {
            SelfAttnKind::Gret => self.n_heads * self.d_head * self.d_head,
            SelfAttnKind::Swa => 2 * self.window * self.d_kv(),
        }
    }
}
