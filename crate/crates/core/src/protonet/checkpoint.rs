//! Single-file checkpoints: every parameter tensor in safetensors layout plus a
//! JSON metadata record (format version, model config, classes, prototype
//! sources, calibrator, run config).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::feature_map::PrototypeSource;
use super::model::{ModelConfig, ProtoNet};
use crate::calibrate::Calibrator;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "protomsl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub prototype_class: Vec<usize>,
    pub sources: Vec<Option<PrototypeSource>>,
    #[serde(default)]
    pub calibrator: Option<Calibrator>,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ProtoNet,
    pub calibrator: Option<Calibrator>,
    pub run_config: serde_json::Value,
    /// Content hash of the file; identifies the model in served payloads.
    pub version: String,
}

/// Short content hash of a checkpoint file.
pub fn model_version(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(version_of(&bytes))
}

fn version_of(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..6])
}

/// Writes the model to `path` and returns its version id.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ProtoNet,
    calibrator: Option<&Calibrator>,
    run_config: &serde_json::Value,
) -> Result<String> {
    let path = path.as_ref();
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.config().clone(),
        class_names: model.class_names().to_vec(),
        prototype_class: model.prototype_class().to_vec(),
        sources: model.sources().to_vec(),
        calibrator: calibrator.cloned(),
        run_config: run_config.clone(),
    };
    let named = model.named_tensors();
    let mut buffers = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = HashMap::new();
    metadata.insert(METADATA_KEY.to_string(), serde_json::to_string(&meta)?);
    let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(version_of(&bytes))
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| Error::Checkpoint("file has no model metadata".into()))?;
    let value: serde_json::Value = serde_json::from_str(raw)?;
    let found = value.get("format_version").cloned().unwrap_or(serde_json::Value::Null);
    if found.as_u64() != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::CheckpointVersion {
            found: found.to_string(),
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = read_meta(&bytes)?;
    let mut model = ProtoNet::new(meta.model.clone(), meta.class_names.clone(), device)?;
    if model.prototype_class() != meta.prototype_class.as_slice() {
        return Err(Error::Checkpoint("prototype class layout does not match the model config".into()));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    for name in model.parameter_names() {
        let view = st
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), device)?;
        model.set_named(&name, &t)?;
    }
    model.set_sources(meta.sources)?;
    Ok(Checkpoint {
        model,
        calibrator: meta.calibrator,
        run_config: meta.run_config,
        version: version_of(&bytes),
    })
}
