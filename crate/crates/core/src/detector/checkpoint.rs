use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorError, ModelConfig, ModelKind};
use crate::scalar::Scalar;
use crate::tensorfile::{read_tensors, to_bytes};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON companion of `params.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub kind: ModelKind,
    pub seed: u64,
    pub parameters: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> DetectorError {
    DetectorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `manifest.json` and `params.bin` into `dir` (created if absent).
pub fn save_checkpoint<S: Scalar>(model: &Detector<S>, dir: &Path) -> Result<(), DetectorError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let tensors: Vec<(String, _)> = model
        .params
        .iter()
        .map(|(_, name, p)| (name.to_string(), p.value.cast::<f64>()))
        .collect();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        kind: model.kind,
        seed: model.seed,
        parameters: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let bin = dir.join("params.bin");
    fs::write(&bin, to_bytes(&tensors)).map_err(|e| io_err(&bin, e))?;
    let json = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text).map_err(|e| io_err(&json, e))?;
    Ok(())
}

/// Rebuilds the model described by the manifest and loads its values.
pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<Detector<S>, DetectorError> {
    let json = dir.join("manifest.json");
    let text = fs::read_to_string(&json).map_err(|e| io_err(&json, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| DetectorError::Format(format!("{}: {e}", json.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(DetectorError::Format(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let mut model = Detector::<S>::new(manifest.model, manifest.kind, manifest.seed)?;
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(|e| io_err(&bin, e))?;
    let tensors =
        read_tensors(&bytes[..]).map_err(|e| DetectorError::Format(format!("{}: {e}", bin.display())))?;
    if tensors.len() != model.params.len() {
        return Err(DetectorError::Format(format!(
            "{} tensors stored, model has {} parameters",
            tensors.len(),
            model.params.len()
        )));
    }
    for (name, t) in tensors {
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| DetectorError::Format(format!("unknown parameter `{name}`")))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(DetectorError::Format(format!(
                "`{name}`: stored {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.cast();
    }
    Ok(model)
}
