use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gret::GretWeights;
use crate::model::config::{ModelConfig, SelfAttnKind};
use crate::swa::SwaWeights;
use crate::tensor::{Real, Tensor};

/// `(swish(x W_G) ⊙ x W_1) W_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiGlu<W> {
    pub w_g: W,
    pub w_1: W,
    pub w_2: W,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer<W> {
    Gret(GretWeights<W>),
    Swa(SwaWeights<W>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfLayer<W> {
    pub attn_norm: W,
    pub mixer: Mixer<W>,
    pub ffn_norm: W,
    pub ffn: SwiGlu<W>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossLayer<W> {
    pub attn_norm: W,
    pub w_q: W,
    pub w_o: W,
    pub ffn_norm: W,
    pub ffn: SwiGlu<W>,
}

/// All model weights. `W` is the weight handle: a shape for layouts, a tensor
/// for evaluation, a tape variable for differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<W> {
    pub embed: W,
    pub self_layers: Vec<SelfLayer<W>>,
    pub kv_norm: W,
    pub w_k: W,
    pub w_v: W,
    pub cross_layers: Vec<CrossLayer<W>>,
    pub final_norm: W,
    /// `d × vocab`; `None` when tied to the embedding.
    pub classifier: Option<W>,
}

impl<W> SwiGlu<W> {
    fn try_map<'a, U, E>(
        &'a self,
        p: &str,
        f: &mut impl FnMut(&str, &'a W) -> Result<U, E>,
    ) -> Result<SwiGlu<U>, E> {
        Ok(SwiGlu {
            w_g: f(&format!("{p}.w_g"), &self.w_g)?,
            w_1: f(&format!("{p}.w_1"), &self.w_1)?,
            w_2: f(&format!("{p}.w_2"), &self.w_2)?,
        })
    }
}

impl<W> Mixer<W> {
    fn try_map<'a, U, E>(
        &'a self,
        p: &str,
        f: &mut impl FnMut(&str, &'a W) -> Result<U, E>,
    ) -> Result<Mixer<U>, E> {
        Ok(match self {
            Mixer::Gret(g) => Mixer::Gret(GretWeights {
                w_q: f(&format!("{p}.gret.w_q"), &g.w_q)?,
                w_k: f(&format!("{p}.gret.w_k"), &g.w_k)?,
                w_v: f(&format!("{p}.gret.w_v"), &g.w_v)?,
                w_gamma: f(&format!("{p}.gret.w_gamma"), &g.w_gamma)?,
                w_g: f(&format!("{p}.gret.w_g"), &g.w_g)?,
                w_o: f(&format!("{p}.gret.w_o"), &g.w_o)?,
            }),
            Mixer::Swa(s) => Mixer::Swa(SwaWeights {
                w_q: f(&format!("{p}.swa.w_q"), &s.w_q)?,
                w_k: f(&format!("{p}.swa.w_k"), &s.w_k)?,
                w_v: f(&format!("{p}.swa.w_v"), &s.w_v)?,
                w_o: f(&format!("{p}.swa.w_o"), &s.w_o)?,
            }),
        })
    }
}

impl<W> Params<W> {
    /// Maps every weight in a fixed order, passing its stable name.
    pub fn try_map<'a, U, E>(
        &'a self,
        mut f: impl FnMut(&str, &'a W) -> Result<U, E>,
    ) -> Result<Params<U>, E> {
        let f = &mut f;
        let embed = f("embed", &self.embed)?;
        let mut self_layers = Vec::with_capacity(self.self_layers.len());
        for (i, l) in self.self_layers.iter().enumerate() {
            let p = format!("self.{i}");
            self_layers.push(SelfLayer {
                attn_norm: f(&format!("{p}.attn_norm"), &l.attn_norm)?,
                mixer: l.mixer.try_map(&p, f)?,
                ffn_norm: f(&format!("{p}.ffn_norm"), &l.ffn_norm)?,
                ffn: l.ffn.try_map(&format!("{p}.ffn"), f)?,
            });
        }
        let kv_norm = f("kv.norm", &self.kv_norm)?;
        let w_k = f("kv.w_k", &self.w_k)?;
        let w_v = f("kv.w_v", &self.w_v)?;
        let mut cross_layers = Vec::with_capacity(self.cross_layers.len());
        for (i, l) in self.cross_layers.iter().enumerate() {
            let p = format!("cross.{i}");
            cross_layers.push(CrossLayer {
                attn_norm: f(&format!("{p}.attn_norm"), &l.attn_norm)?,
                w_q: f(&format!("{p}.w_q"), &l.w_q)?,
                w_o: f(&format!("{p}.w_o"), &l.w_o)?,
                ffn_norm: f(&format!("{p}.ffn_norm"), &l.ffn_norm)?,
                ffn: l.ffn.try_map(&format!("{p}.ffn"), f)?,
            });
        }
        let final_norm = f("final_norm", &self.final_norm)?;
        let classifier = match &self.classifier {
            Some(c) => Some(f("classifier", c)?),
            None => None,
        };
        Ok(Params {
            embed,
            self_layers,
            kv_norm,
            w_k,
            w_v,
            cross_layers,
            final_norm,
            classifier,
        })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a W) -> U) -> Params<U> {
        self.try_map(|n, w| Ok::<U, std::convert::Infallible>(f(n, w)))
            .unwrap_or_else(|e| match e {})
    }

    /// Weights in the fixed traversal order, with their names.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        self.map(|n, w| out.push((n.to_string(), w)));
        out
    }

    /// Classifier handle, falling back to the embedding when tied.
    pub fn classifier_or_embed(&self) -> (&W, bool) {
        match &self.classifier {
            Some(c) => (c, false),
            None => (&self.embed, true),
        }
    }
}

/// Shapes of every weight for `cfg`.
pub fn layout(cfg: &ModelConfig) -> Params<Vec<usize>> {
    let (d, f, dkv) = (cfg.d_model, cfg.ffn_dim, cfg.d_kv());
    let ffn = || SwiGlu {
        w_g: vec![d, f],
        w_1: vec![d, f],
        w_2: vec![f, d],
    };
    let gain = || vec![1, d];
    let mixer = || match cfg.self_attn_kind {
        SelfAttnKind::Gret => Mixer::Gret(GretWeights {
            w_q: vec![d, d],
            w_k: vec![d, d],
            w_v: vec![d, d],
            w_gamma: vec![d, cfg.n_heads],
            w_g: vec![d, d],
            w_o: vec![d, d],
        }),
        SelfAttnKind::Swa => Mixer::Swa(SwaWeights {
            w_q: vec![d, d],
            w_k: vec![d, dkv],
            w_v: vec![d, dkv],
            w_o: vec![d, d],
        }),
    };
    let half = cfg.half_layers();
    Params {
        embed: vec![cfg.vocab_size, d],
        self_layers: (0..half)
            .map(|_| SelfLayer {
                attn_norm: gain(),
                mixer: mixer(),
                ffn_norm: gain(),
                ffn: ffn(),
            })
            .collect(),
        kv_norm: gain(),
        w_k: vec![d, dkv],
        w_v: vec![d, dkv],
        cross_layers: (0..half)
            .map(|_| CrossLayer {
                attn_norm: gain(),
                w_q: vec![d, d],
                w_o: vec![d, d],
                ffn_norm: gain(),
                ffn: ffn(),
            })
            .collect(),
        final_norm: gain(),
        classifier: (!cfg.tie_embeddings).then(|| vec![d, cfg.vocab_size]),
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("norm")
}

/// Total parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    layout(cfg)
        .named()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Parameter count excluding the embedding and classifier.
pub fn non_embedding_count(cfg: &ModelConfig) -> usize {
    layout(cfg)
        .named()
        .iter()
        .filter(|(n, _)| n != "embed" && n != "classifier")
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Deterministic initialization: norm gains are one, every matrix is drawn
/// from `N(0, 1/d_model)`. Draws are rounded to `f32` so the same seed gives
/// the same values at either precision.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Params<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (cfg.d_model as f64).powf(-0.5)).expect("valid std");
    layout(cfg).map(|name, shape| {
        let n: usize = shape.iter().product();
        let data = if is_gain(name) {
            vec![T::one(); n]
        } else {
            (0..n)
                .map(|_| T::of(normal.sample(&mut rng) as f32 as f64))
                .collect()
        };
        Tensor::new(shape.clone(), data).expect("layout shapes are consistent")
    })
}

impl<T: Real> Params<Tensor<T>> {
    pub fn cast<U: Real>(&self) -> Params<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    /// Order- and bit-sensitive digest of all weights.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.named() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Checks every weight against the shapes `cfg` requires.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg).named().into_iter().map(|(n, s)| (n, s.clone())).collect::<Vec<_>>();
        let have = self.named();
        if want.len() != have.len() {
            return Err(Error::Weights(format!(
                "expected {} tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((wn, ws), (hn, ht)) in want.iter().zip(have) {
            if *wn != hn || ws.as_slice() != ht.shape() {
                return Err(Error::Weights(format!(
                    "tensor {hn} {:?} does not match expected {wn} {ws:?}",
                    ht.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_different_seed_differs() {
        let cfg = ModelConfig::tiny();
        let a = init_params::<f32>(&cfg, 7);
        assert_eq!(a, init_params::<f32>(&cfg, 7));
        assert_eq!(a.checksum(), init_params::<f32>(&cfg, 7).checksum());
        assert_ne!(a.checksum(), init_params::<f32>(&cfg, 8).checksum());
    }

    #[test]
    fn precisions_hold_the_same_values() {
        let cfg = ModelConfig::tiny_swa();
        let a = init_params::<f32>(&cfg, 1);
        let b = init_params::<f64>(&cfg, 1);
        assert_eq!(a.cast::<f64>(), b);
    }

    #[test]
    fn counts_match_closed_forms() {
        let cfg = ModelConfig::yoco_3b();
        let (d, f, h, dkv) = (3072usize, 8192usize, 24usize, 1024usize);
        let self_layer = 5 * d * d + d * h + 3 * d * f + 2 * d;
        let cross_layer = 2 * d * d + 3 * d * f + 2 * d;
        let want = 13 * self_layer + 13 * cross_layer + 2 * d * dkv + 2 * d;
        assert_eq!(non_embedding_count(&cfg), want);
        assert_eq!(param_count(&cfg), want + 2 * 100_288 * d);
    }

    #[test]
    fn tied_config_has_no_classifier() {
        let mut cfg = ModelConfig::tiny();
        cfg.tie_embeddings = true;
        let p = init_params::<f64>(&cfg, 0);
        assert!(p.classifier.is_none());
        assert!(p.classifier_or_embed().1);
        p.check_shapes(&cfg).unwrap();
        assert!(p.check_shapes(&ModelConfig::tiny()).is_err());
    }

    #[test]
    fn gains_start_at_one() {
        let p = init_params::<f64>(&ModelConfig::tiny(), 3);
        assert!(p.final_norm.data().iter().all(|&g| g == 1.0));
        assert!(p.w_k.data().iter().any(|&w| w != 0.0));
    }
}
