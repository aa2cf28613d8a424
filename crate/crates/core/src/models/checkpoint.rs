//! Checkpoint files: weight maps keyed by canonical parameter names, with
//! the backbone spec and a content digest so checkpoints are diffable.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, BackboneSpec, Model};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Serialize, Deserialize)]
struct ParamBlob {
    shape: Vec<usize>,
    /// Little-endian f64 bytes, base64.
    data: String,
}

/// On-disk checkpoint document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: BackboneSpec,
    params: BTreeMap<String, ParamBlob>,
    /// SHA-256 over the spec and all parameter bytes in name order.
    pub digest: String,
    /// Free-form provenance (config digest, fold id, epoch).
    pub meta: BTreeMap<String, String>,
}

fn encode_param(value: &ArrayD<f64>) -> ParamBlob {
    let mut bytes = Vec::with_capacity(value.len() * 8);
    for v in value.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    ParamBlob {
        shape: value.shape().to_vec(),
        data: B64.encode(bytes),
    }
}

fn content_digest(spec: &BackboneSpec, params: &BTreeMap<String, ParamBlob>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(spec).expect("spec serializes"));
    for (name, blob) in params {
        hasher.update(name.as_bytes());
        hasher.update([0x1f]);
        for d in &blob.shape {
            hasher.update(d.to_le_bytes());
        }
        hasher.update(blob.data.as_bytes());
    }
    format!("{:x}", hasher.finalize())
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: BTreeMap<String, String>) -> Checkpoint {
        let params: BTreeMap<String, ParamBlob> = model
            .params
            .iter()
            .map(|(name, value)| (name.to_string(), encode_param(value)))
            .collect();
        let digest = content_digest(&model.spec, &params);
        Checkpoint {
            spec: model.spec.clone(),
            params,
            digest,
            meta,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let expected = content_digest(&self.spec, &self.params);
        if expected != self.digest {
            return Err(Error::Checkpoint(format!(
                "digest mismatch: stored {} vs recomputed {}",
                self.digest, expected
            )));
        }
        // Validate the parameter set against a freshly built skeleton.
        let skeleton = build_model(&self.spec, 0)?;
        let mut store = ParamStore::new();
        for (name, blob) in &self.params {
            if !skeleton.params.contains(name) {
                return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
            }
            let raw = B64
                .decode(&blob.data)
                .map_err(|e| Error::Checkpoint(format!("bad base64 in {name}: {e}")))?;
            if raw.len() % 8 != 0 {
                return Err(Error::Checkpoint(format!("odd byte count in {name}")));
            }
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let expected_len: usize = blob.shape.iter().product();
            if values.len() != expected_len {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: {} values for shape {:?}",
                    values.len(),
                    blob.shape
                )));
            }
            if skeleton.params.get(name).shape() != blob.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match spec {:?}",
                    blob.shape,
                    skeleton.params.get(name).shape()
                )));
            }
            store.insert_raw(
                name.clone(),
                ArrayD::from_shape_vec(IxDyn(&blob.shape), values).unwrap(),
            );
        }
        if store.len() != skeleton.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, spec requires {}",
                store.len(),
                skeleton.params.len()
            )));
        }
        Ok(Model {
            spec: self.spec,
            params: store,
        })
    }
}

pub fn save_checkpoint(
    model: &Model,
    meta: BTreeMap<String, String>,
    path: &Path,
) -> Result<String> {
    let ckpt = Checkpoint::from_model(model, meta);
    let json = serde_json::to_string(&ckpt).expect("checkpoint serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(ckpt.digest)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::forward;
    use ndarray::IxDyn;
    use rand::Rng;

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let spec = BackboneSpec::conv_cbam(32, 8, 6);
        let model = build_model(&spec, 41).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let digest = save_checkpoint(&model, BTreeMap::new(), &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.params, loaded.params);

        // Same weights, same digest.
        let digest2 = save_checkpoint(&loaded, BTreeMap::new(), &path).unwrap();
        assert_eq!(digest, digest2);

        let mut rng = crate::seeding::stream_rng(1, "ckpt");
        let batch =
            ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 3, 32, 32]), |_| rng.random_range(-1.0..1.0));
        let a = forward(&model, &batch).unwrap();
        let b = forward(&loaded, &batch).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn corrupted_digest_is_rejected() {
        let spec = BackboneSpec::conv_cbam(32, 8, 6);
        let model = build_model(&spec, 43).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, BTreeMap::new());
        ckpt.digest = "0".repeat(64);
        assert!(ckpt.into_model().is_err());
    }
}
