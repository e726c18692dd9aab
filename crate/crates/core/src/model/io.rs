//! Weights on disk: a JSON manifest naming each tensor's shape and byte
//! offset, next to a flat little-endian `f32` blob.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{layout, Params};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `manifest` and a sibling `.bin` blob. Values are stored as `f32`.
pub fn save_weights<T: Real>(
    params: &Params<Tensor<T>>,
    cfg: &ModelConfig,
    manifest: &Path,
) -> Result<()> {
    params.check_shapes(cfg)?;
    let blob = blob_path(manifest);
    let mut bytes = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, t) in params.named() {
        tensors.insert(
            name,
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: bytes.len(),
            },
        );
        for v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let m = Manifest {
        blob: blob
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad weights path {}", manifest.display())))?
            .to_string(),
        config: cfg.clone(),
        tensors,
    };
    std::fs::write(&blob, bytes)?;
    std::fs::write(manifest, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Weights(format!("manifest: {e}")))?;
    m.config.validate()?;
    Ok(m)
}

/// Loads weights saved by [`save_weights`], checking every shape, offset and
/// the blob length against the manifest's config.
pub fn load_weights<T: Real>(path: &Path) -> Result<(ModelConfig, Params<Tensor<T>>)> {
    let m = read_manifest(path)?;
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&m.blob);
    let bytes = std::fs::read(blob_file)?;
    let expected = layout(&m.config);
    if expected.named().len() != m.tensors.len() {
        return Err(Error::Weights(format!(
            "manifest lists {} tensors, config needs {}",
            m.tensors.len(),
            expected.named().len()
        )));
    }
    let mut end = 0;
    let params = expected.try_map(|name, shape| {
        let e = m
            .tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if e.dtype != "f32" {
            return Err(Error::Weights(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        if &e.shape != shape {
            return Err(Error::Weights(format!(
                "{name}: shape {:?}, expected {shape:?}",
                e.shape
            )));
        }
        let n: usize = shape.iter().product();
        let range = e.offset..e.offset + 4 * n;
        let raw = bytes
            .get(range.clone())
            .ok_or_else(|| Error::Weights(format!("{name}: bytes {range:?} outside blob")))?;
        end = end.max(range.end);
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Tensor::new(shape.clone(), data)
    })?;
    if end != bytes.len() {
        return Err(Error::Weights(format!(
            "blob has {} bytes, manifest covers {end}",
            bytes.len()
        )));
    }
    for (name, t) in params.named() {
        if !t.is_finite() {
            return Err(Error::Weights(format!("{name}: non-finite value")));
        }
    }
    Ok((m.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let cfg = ModelConfig::tiny_swa();
        let p = init_params::<f32>(&cfg, 5);
        save_weights(&p, &cfg, &path).unwrap();
        let (c2, q) = load_weights::<f32>(&path).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p, q);
        let (_, q64) = load_weights::<f64>(&path).unwrap();
        assert_eq!(q64, init_params::<f64>(&cfg, 5));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let cfg = ModelConfig::tiny();
        save_weights(&init_params::<f32>(&cfg, 0), &cfg, &path).unwrap();
        let blob = path.with_extension("bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_weights::<f32>(&path), Err(Error::Weights(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let cfg = ModelConfig::tiny();
        save_weights(&init_params::<f32>(&cfg, 0), &cfg, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replacen("\"n_heads\": 4", "\"n_heads\": 2, \"__x\": 0", 1);
        std::fs::write(&path, text).unwrap();
        assert!(load_weights::<f32>(&path).is_err());
    }
}
