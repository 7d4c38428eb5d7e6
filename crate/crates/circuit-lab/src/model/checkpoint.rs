//! Model persistence in the shared binary container.
//!
//! A checkpoint stores the JSON-encoded [`ModelConfig`] as its header and
//! one f32 tensor per parameter, keyed by the parameter's layout name.
//! Loading rebuilds the parameter list in layout order and validates every
//! name and shape, so a file from a mismatched config fails loudly instead
//! of producing a silently scrambled model.

use std::path::Path;

use crate::blob::{read_blob, write_blob};
use crate::error::{Error, Result};
use crate::model::{GptModel, ModelConfig, Param};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// File magic for model checkpoints.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MICLCKP1";

/// Write `model` to `path`. Payloads are stored as f32 regardless of the
/// model's working precision.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &GptModel<T>) -> Result<()> {
    let header = serde_json::to_string(&model.config).map_err(|e| Error::json(path, e))?;
    let tensors: Vec<(&str, &crate::tensor::Tensor<T>)> = model
        .params
        .iter()
        .map(|p| (p.name.as_str(), &p.tensor))
        .collect();
    write_blob(path, CHECKPOINT_MAGIC, &header, &tensors)
}

/// Read a checkpoint back as an f32 model. Every parameter the config
/// implies must be present with the right shape, and nothing extra may be
/// in the file. Trainability resets to fully trainable.
pub fn load_checkpoint(path: &Path) -> Result<GptModel<f32>> {
    let blob = read_blob(path, CHECKPOINT_MAGIC)?;
    let config: ModelConfig =
        serde_json::from_str(&blob.header_json).map_err(|e| Error::json(path, e))?;
    config.validate()?;

    // A throwaway init gives the authoritative name/shape skeleton for this
    // config; its values are immediately replaced from the file.
    let skeleton = GptModel::<f32>::init(config.clone(), &mut Rng::new(0))?;
    let bad = |msg: String| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        msg,
    };
    if blob.tensors.len() != skeleton.params.len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors but the config implies {}",
            blob.tensors.len(),
            skeleton.params.len()
        )));
    }
    let params = skeleton
        .params
        .iter()
        .map(|p| {
            let tensor = blob
                .tensor(&p.name)
                .ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
            if tensor.shape() != p.tensor.shape() {
                return Err(bad(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    tensor.shape(),
                    p.tensor.shape()
                )));
            }
            Ok(Param {
                name: p.name.clone(),
                tensor: tensor.clone(),
                trainable: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GptModel { config, params })
}
