use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::serialize::{decode, encode, Block};
use crate::autodiff::{OptimizerState, ParamStore};
use crate::error::{bail, Error, Result};
use crate::gan::StageState;
use crate::raster::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "urbanform-checkpoint";

/// Header of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    /// Completed iterations; training resumes at this iteration.
    pub iter: usize,
    /// Stage of the last completed iteration.
    pub stage: StageState,
    pub config: TrainConfig,
    pub config_hash: String,
    pub population_scale: f64,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
}

/// Named arrays of both networks and their optimizers, plus the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blocks: Vec<Block>,
}

pub(crate) fn store_blocks(prefix: &str, store: &ParamStore<f32>, opt: &OptimizerState<f32>, out: &mut Vec<Block>) {
    for (name, p) in store.param_names().iter().zip(store.params()) {
        out.push(Block {
            name: format!("{prefix}.param/{name}"),
            shape: p.shape().to_vec(),
            data: p.values().to_vec(),
        });
    }
    for (name, b) in store.buffer_names().iter().zip(store.buffers()) {
        out.push(Block {
            name: format!("{prefix}.buffer/{name}"),
            shape: vec![b.len()],
            data: b.clone(),
        });
    }
    for (kind, moments) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
        for (name, m) in store.param_names().iter().zip(moments) {
            out.push(Block {
                name: format!("{prefix}.{kind}/{name}"),
                shape: vec![m.len()],
                data: m.clone(),
            });
        }
    }
}

/// Restores every parameter, buffer and moment of `store` from `blocks`; each
/// must be present exactly once.
pub(crate) fn restore_store(
    prefix: &str,
    blocks: &[Block],
    store: &mut ParamStore<f32>,
    opt: &mut OptimizerState<f32>,
    steps: u64,
) -> Result<()> {
    let find = |name: String| -> Result<&Block> {
        blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
    };
    let names = store.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let b = find(format!("{prefix}.param/{name}"))?;
        store.set_param_values(name, &b.shape, b.data.clone())?;
        for (kind, moments) in [("adam_m", &mut opt.m), ("adam_v", &mut opt.v)] {
            let b = find(format!("{prefix}.{kind}/{name}"))?;
            if b.data.len() != moments[i].len() {
                bail!(Shape, "moment {kind} of {name} has the wrong length");
            }
            moments[i] = b.data.clone();
        }
    }
    for name in store.buffer_names().to_vec() {
        let b = find(format!("{prefix}.buffer/{name}"))?;
        store.set_buffer_values(&name, b.data.clone())?;
    }
    let expected = names.len() * 3 + store.buffer_names().len();
    let present = blocks.iter().filter(|b| b.name.starts_with(&format!("{prefix}."))).count();
    if present != expected {
        bail!(Format, "checkpoint has {present} {prefix} blocks, model needs {expected}");
    }
    opt.step = steps;
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.meta).expect("header serializes");
        encode(&header, &self.blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, blocks) = decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&header)?;
        if meta.format != CHECKPOINT_FORMAT {
            bail!(Format, "unknown checkpoint format {:?}", meta.format);
        }
        if meta.config_hash != meta.config.hash() {
            bail!(Format, "checkpoint config hash does not match its config");
        }
        Ok(Self { meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn file_name(iter: usize) -> String {
        format!("ckpt_{iter}.bin")
    }
}
