//! Versioned checkpoints: a flat little-endian `f64` blob of every parameter
//! block plus a JSON manifest with the architecture and block layout.
//!
//! Blob layout: the 8 magic bytes `RKNCKPT1`, the parameter count as `u64`,
//! then the parameters in block order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossHead, ModelConfig, RknModel};
use crate::params::Parameterized;

pub const MAGIC: &[u8; 8] = b"RKNCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchManifest {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub m: usize,
    pub bandwidth: usize,
    pub num_basis: usize,
    pub coeff_hidden: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub image_hidden: Vec<usize>,
    pub head: String,
}

impl ArchManifest {
    pub fn of(c: &ModelConfig) -> Self {
        Self {
            obs_dim: c.obs_dim,
            state_dim: c.state_dim,
            m: c.m,
            bandwidth: c.bandwidth,
            num_basis: c.num_basis,
            coeff_hidden: c.coeff_hidden,
            encoder_hidden: c.encoder_hidden.clone(),
            decoder_hidden: c.decoder_hidden.clone(),
            image_hidden: c.image_hidden.clone(),
            head: c.head.name().into(),
        }
    }

    pub fn to_config(&self) -> Result<ModelConfig> {
        let head = LossHead::parse(&self.head)
            .ok_or_else(|| Error::Checkpoint(format!("unknown loss head '{}'", self.head)))?;
        Ok(ModelConfig {
            obs_dim: self.obs_dim,
            state_dim: self.state_dim,
            m: self.m,
            bandwidth: self.bandwidth,
            num_basis: self.num_basis,
            coeff_hidden: self.coeff_hidden,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            image_hidden: self.image_hidden.clone(),
            head,
        })
    }
}

/// Training facts needed to reproduce the validation split at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub val_fraction: f64,
    pub epochs_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub num_params: usize,
    pub architecture: ArchManifest,
    pub blocks: Vec<BlockEntry>,
    pub training: TrainingMeta,
}

/// `model.ckpt` -> `model.ckpt.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing RKNCKPT1 header".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * n {
        return Err(Error::Checkpoint(format!(
            "header announces {n} parameters but the body holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(path: &Path, model: &RknModel, training: &TrainingMeta) -> Result<()> {
    let manifest = CheckpointManifest {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        num_params: model.num_params(),
        architecture: ArchManifest::of(&model.config),
        blocks: model
            .block_layout()
            .into_iter()
            .map(|(name, len)| BlockEntry { name, len })
            .collect(),
        training: training.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, encode_params(&model.to_flat())).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(mpath, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(RknModel, TrainingMeta)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if manifest.format.as_bytes() != MAGIC {
        return Err(Error::Checkpoint(format!("unsupported format '{}'", manifest.format)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_params(&bytes)?;
    // parameters are overwritten below; the seed only fixes the shapes
    let mut model = RknModel::new(manifest.architecture.to_config()?, &mut ChaCha8Rng::seed_from_u64(0))?;
    let layout: Vec<BlockEntry> = model
        .block_layout()
        .into_iter()
        .map(|(name, len)| BlockEntry { name, len })
        .collect();
    if layout != manifest.blocks {
        return Err(Error::Checkpoint("block layout does not match the architecture".into()));
    }
    if params.len() != model.num_params() || manifest.num_params != params.len() {
        return Err(Error::Checkpoint(format!(
            "architecture needs {} parameters, file holds {}",
            model.num_params(),
            params.len()
        )));
    }
    model.set_flat(&params);
    Ok((model, manifest.training))
}

/// Fails unless data of the given widths can be fed to `model`.
pub fn check_compatible(model: &RknModel, obs_dim: usize, target_dim: usize) -> Result<()> {
    if model.config.obs_dim != obs_dim || model.config.state_dim != target_dim {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects observations of width {} and targets of width {}, data has {obs_dim} and {target_dim}",
            model.config.obs_dim, model.config.state_dim
        )));
    }
    Ok(())
}
