//! Single-file checkpoints: named parameters in safetensors with the run config in the header.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::MirrorSegModel;

const CONFIG_KEY: &str = "mirrorseg.config";
const FORMAT_KEY: &str = "mirrorseg.format";
const FORMAT: &str = "1";

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn save_checkpoint(model: &MirrorSegModel, path: &Path) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = model
        .params()
        .named()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    let metadata = HashMap::from([
        (CONFIG_KEY.to_string(), model.config().to_text()),
        (FORMAT_KEY.to_string(), FORMAT.to_string()),
    ]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a truncated checkpoint behind
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(metadata), &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn stored_config(path: &Path, bytes: &[u8]) -> Result<RunConfig> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| load_err(path, e))?;
    let meta = meta.metadata().as_ref().ok_or_else(|| load_err(path, "no metadata header"))?;
    if meta.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(load_err(path, "not a mirrorseg checkpoint"));
    }
    let text = meta.get(CONFIG_KEY).ok_or_else(|| load_err(path, "missing run config"))?;
    let mut cfg = RunConfig::toy();
    cfg.apply_text(text)?;
    Ok(cfg)
}

/// The run config stored in a checkpoint.
pub fn read_checkpoint_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).map_err(|e| load_err(path, e))?;
    stored_config(path, &bytes)
}

/// Loads a checkpoint. With `expected`, every architecture field must agree; the returned
/// model then carries `expected` (so non-architectural settings such as the prompt count come
/// from the caller).
pub fn load_checkpoint(path: &Path, expected: Option<&RunConfig>, dtype: DType) -> Result<MirrorSegModel> {
    let bytes = std::fs::read(path).map_err(|e| load_err(path, e))?;
    let stored = stored_config(path, &bytes)?;
    let cfg = match expected {
        Some(exp) => {
            for ((field, ours), (_, theirs)) in exp.architecture().into_iter().zip(stored.architecture()) {
                if ours != theirs {
                    return Err(Error::CheckpointMismatch {
                        field: field.to_string(),
                        checkpoint: theirs,
                        config: ours,
                    });
                }
            }
            exp.clone()
        }
        None => stored,
    };
    let model = MirrorSegModel::new(&cfg, dtype)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    for (name, var) in model.params().named() {
        let t = tensors
            .get(name)
            .ok_or_else(|| load_err(path, format!("missing parameter `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(load_err(
                path,
                format!("parameter `{name}` has shape {:?}, expected {:?}", t.dims(), var.dims()),
            ));
        }
        var.set(&t.to_dtype(dtype)?)?;
    }
    if let Some(extra) = tensors.keys().find(|k| model.params().get(k).is_none()) {
        return Err(load_err(path, format!("unexpected parameter `{extra}`")));
    }
    Ok(model)
}
