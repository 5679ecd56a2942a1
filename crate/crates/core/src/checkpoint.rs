//! Saving and loading model parameters bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{BlobWriter, Container};
use crate::error::{Error, Result};
use crate::layers::{CrateParams, ModelConfig};
use crate::rng::Rng;

const CHECKPOINT_FORMAT: &str = "whitebox-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Completed training epochs when the checkpoint was written.
    pub epoch: usize,
}

pub fn save_checkpoint(path: &Path, params: &CrateParams, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BlobWriter::new();
    for (name, m) in params.tensors() {
        w.push_f64(name, &[m.rows(), m.cols()], m.as_slice())?;
    }
    w.write(path, CHECKPOINT_FORMAT, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(CrateParams, CheckpointMeta)> {
    let c: Container<CheckpointMeta> = Container::read(path, CHECKPOINT_FORMAT)?;
    let meta = c.manifest.meta.clone();
    meta.model.validate()?;
    // Shapes come from the config; values are overwritten below.
    let mut params = CrateParams::init(&meta.model, &mut Rng::new(0))?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if c.manifest.entries.len() != names.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} tensors stored, model has {}", c.manifest.entries.len(), names.len()),
        });
    }
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let (shape, values) = c.f64(name)?;
        if shape != [slot.rows(), slot.cols()] {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("{name}: stored shape {shape:?}, expected {:?}", slot.shape()),
            });
        }
        slot.as_mut_slice().copy_from_slice(&values);
    }
    Ok((params, meta))
}

/// Name, shape and a few statistics for each stored tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frobenius_norm: f64,
    pub max_abs: f64,
}

pub fn checkpoint_info(params: &CrateParams) -> Vec<TensorInfo> {
    params
        .tensors()
        .into_iter()
        .map(|(name, m)| TensorInfo {
            name,
            rows: m.rows(),
            cols: m.cols(),
            frobenius_norm: m.frobenius_norm(),
            max_abs: m.max_abs(),
        })
        .collect()
}
