//! Checkpoint directory: `checkpoint.json` (manifest) + `params.bin`
//! (little-endian f32, tensors concatenated in manifest order).

use super::{Model, ModelConfig};
use crate::autograd::{Params, Tensor};
use crate::error::{Error, Result};
use crate::matching::CHANNEL_ORDERING;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "homonet-checkpoint-v1";
const DTYPE: &str = "f32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    /// Content hash prefix of config and parameters.
    pub id: String,
    /// Free-form training label such as `FMRH-ss`.
    pub label: String,
    pub config: ModelConfig,
    pub d: usize,
    pub image_size: usize,
    pub channel_ordering: String,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
}

fn param_bytes(params: &Params<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(params.num_elements() * 4);
    for id in params.ids() {
        for v in &params.get(id).data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn content_id(config: &ModelConfig, bytes: &[u8]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(bytes);
    Ok(h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(model: &Model<f32>, label: &str, dir: &Path) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir)?;
    let bytes = param_bytes(&model.params);
    let cfg = model.config().clone();
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        id: content_id(&cfg, &bytes)?,
        label: label.into(),
        d: cfg.extractor.d(),
        image_size: cfg.image_size,
        channel_ordering: CHANNEL_ORDERING.into(),
        dtype: DTYPE.into(),
        params: model
            .params
            .ids()
            .map(|id| ParamEntry { name: model.params.name(id).into(), shape: model.params.get(id).shape.clone() })
            .collect(),
        config: cfg,
    };
    std::fs::write(dir.join(PARAMS_FILE), &bytes)?;
    std::fs::write(dir.join(CHECKPOINT_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let manifest = dir.join(CHECKPOINT_FILE);
    if !manifest.exists() {
        return Err(Error::CorruptCheckpoint(format!("no {} in {}", CHECKPOINT_FILE, dir.display())));
    }
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(manifest)?)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if meta.format != FORMAT {
        return Err(Error::CorruptCheckpoint(format!("unknown format {:?}", meta.format)));
    }
    if meta.channel_ordering != CHANNEL_ORDERING {
        return Err(Error::ConventionMismatch { expected: CHANNEL_ORDERING.into(), found: meta.channel_ordering });
    }
    if meta.dtype != DTYPE {
        return Err(Error::ConventionMismatch { expected: DTYPE.into(), found: meta.dtype });
    }
    if meta.d != meta.config.extractor.d() || meta.image_size != meta.config.image_size {
        return Err(Error::CorruptCheckpoint("manifest D / image size disagree with the model config".into()));
    }
    let bytes = std::fs::read(dir.join(PARAMS_FILE))?;
    let total: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(Error::CorruptCheckpoint(format!("{} holds {} bytes, expected {}", PARAMS_FILE, bytes.len(), total * 4)));
    }
    let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut params = Params::new();
    for p in &meta.params {
        let n = p.shape.iter().product();
        params.push(p.name.clone(), Tensor::from_vec(&p.shape, values.by_ref().take(n).collect()));
    }
    let model = Model::from_params(meta.config.clone(), params)?;
    Ok((model, meta))
}
