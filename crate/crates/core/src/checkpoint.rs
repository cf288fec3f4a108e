//! Checkpoint directories: `manifest.json`, `params.bin` (little-endian f64)
//! and `vocab.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::Vocabulary;
use crate::error::{Error, Result};
use crate::io::{create_dir_all, read_to_string, write_atomic};
use crate::model::{DepBert, ModelConfig};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.json";
const FORMAT: &str = "depcause-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    /// Free-form training metadata (optimizer settings, epoch, seed).
    #[serde(default)]
    pub training: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(dir: &Path, model: &DepBert, training: serde_json::Value) -> Result<Manifest> {
    create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(model.params().num_scalars() * 8);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
            len: t.len(),
        });
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f64-le".into(),
        model: model.config().clone(),
        training,
        tensors,
    };
    write_atomic(&dir.join(PARAMS_FILE), &bytes)?;
    write_atomic(&dir.join(VOCAB_FILE), model.vocab().to_json().as_bytes())?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&read_to_string(&path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and fills in its weights.
/// Any disagreement between stored tensors and the configured layout is an
/// error naming the offending tensor.
pub fn load(dir: &Path) -> Result<(DepBert, Manifest)> {
    let manifest = read_manifest(dir)?;
    let vocab = Vocabulary::from_json(&read_to_string(&dir.join(VOCAB_FILE))?)?;
    let path = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut model = DepBert::new(manifest.model.clone(), vocab, 0)?;
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Checkpoint(format!("tensor `{}`: shape {:?} does not hold {} values", e.name, e.shape, e.len)));
        }
        let end = e.offset + e.len * 8;
        let raw = bytes.get(e.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{}` extends past the end of {PARAMS_FILE}", e.name))
        })?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    model.load_params(named)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vitamin_d_fixture;

    fn model() -> DepBert {
        let config = ModelConfig {
            d_model: 8,
            left_heads: 2,
            max_len: 12,
            ..ModelConfig::default()
        };
        DepBert::new(config, Vocabulary::build(&[vitamin_d_fixture()], 1, 12).unwrap(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save(dir.path(), &m, serde_json::json!({"epoch": 4})).unwrap();
        let (back, manifest) = load(dir.path()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.vocab(), m.vocab());
        assert_eq!(manifest.training["epoch"], 4);
        assert!(!dir.path().join(".params.bin.tmp").exists());
    }

    #[test]
    fn config_mismatch_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(), serde_json::Value::Null).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        manifest.model.d_model = 4;
        std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("embed.token"), "{err}");
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(), serde_json::Value::Null).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("classifier.b"), "{err}");
    }
}
