//! Model checkpoints: a JSON manifest plus one tensor container per parameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Arch, MtlModel, Strategy};
use crate::data::container::{self, Payload};
use crate::data::manifest::{read_ref, write_bytes, FileRef};
use crate::data::TaskKind;
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub arch: Arch,
    pub in_channels: usize,
    pub tasks: Vec<TaskKind>,
    pub strategy: Strategy,
    pub seed: u64,
    pub config_hash: String,
    pub params: Vec<(String, FileRef)>,
}

/// SHA-256 over parameter names and little-endian parameter bytes.
pub fn model_hash(model: &MtlModel) -> String {
    let mut bytes = Vec::new();
    for (name, t) in model.param_names().iter().zip(model.params()) {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::data::manifest::sha256_hex(&bytes)
}

/// Writes `model` into `dir` (new files only) and returns the manifest path.
pub fn save_model(dir: &Path, model: &MtlModel, strategy: Strategy, seed: u64, config_hash: &str) -> Result<PathBuf> {
    let params = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(name, t)| Ok((name.clone(), write_bytes(dir, &format!("{name}.mtue"), &container::encode_f32(t)?)?)))
        .collect::<Result<_>>()?;
    let m = ModelManifest {
        arch: model.arch().clone(),
        in_channels: model.in_channels(),
        tasks: model.task_kinds().to_vec(),
        strategy,
        seed,
        config_hash: config_hash.to_string(),
        params,
    };
    let path = dir.join(CHECKPOINT_FILE);
    container::write_new(&path, serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(path)
}

pub fn load_model(dir: &Path) -> Result<(MtlModel, ModelManifest)> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ModelManifest = serde_json::from_str(&text)?;
    let params = m
        .params
        .iter()
        .map(|(name, r)| match read_ref(dir, r)? {
            Payload::F32(t) => Ok(t),
            Payload::I32(_) => Err(Error::invalid(format!("parameter {name} stored as integers"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MtlModel::from_parts(m.arch.clone(), m.in_channels, m.tasks.clone(), params)?;
    Ok((model, m))
}
