use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Condition, DenoiserArch, EpsModel};
use crate::error::{Error, Result};
use crate::io;

pub const MODEL_FORMAT: &str = "score-forge/denoiser-v1";

/// JSON header stored next to the flat parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    pub data_dim: usize,
    pub arch: DenoiserArch,
    pub condition_vocabulary: Vec<Condition>,
    pub timesteps: usize,
    pub schedule_hash: String,
    pub seed: u64,
    pub params_hash: String,
    pub n_params: usize,
}

/// Writes `stem.json` and `stem.bin`.
pub fn save_model(model: &EpsModel, stem: &Path) -> Result<ModelHeader> {
    let header = ModelHeader {
        format: MODEL_FORMAT.to_string(),
        layer_sizes: model.layer_sizes(),
        data_dim: model.data_dim(),
        arch: model.arch().clone(),
        condition_vocabulary: model.vocab().to_vec(),
        timesteps: model.timesteps(),
        schedule_hash: model.schedule_hash().to_string(),
        seed: model.seed(),
        params_hash: model.params_hash(),
        n_params: model.params().len(),
    };
    io::write_blob(stem, &header, model.params())?;
    Ok(header)
}

pub fn load_model(stem: &Path) -> Result<EpsModel> {
    let (header, params): (ModelHeader, Vec<f64>) = io::read_blob(stem)?;
    if header.format != MODEL_FORMAT {
        return Err(Error::config(format!("unsupported checkpoint format {:?}", header.format)));
    }
    let model = EpsModel::from_parts(
        header.data_dim,
        header.arch.clone(),
        header.condition_vocabulary.clone(),
        header.timesteps,
        header.schedule_hash.clone(),
        header.seed,
        params,
    )?;
    if model.params_hash() != header.params_hash || model.layer_sizes() != header.layer_sizes {
        return Err(Error::config(format!("checkpoint {} does not match its header", stem.display())));
    }
    Ok(model)
}
