//! Checkpoint directories.
//!
//! ```text
//! <dir>/centers.msvf        K × D
//! <dir>/weights.msvf        K × D
//! <dir>/biases.msvf         K
//! <dir>/adam_m_*.msvf       first moments (centers, weights, biases), if present
//! <dir>/adam_v_*.msvf       second moments, if present
//! <dir>/meta.json           configuration echo, iteration, seed, trainer progress
//! ```
//!
//! Tensors are float32. Writing is deterministic: loading a checkpoint and
//! saving it again reproduces every file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tensor::{read_tensor, write_tensor};
use crate::mining::Triplet;
use crate::netvlad::VladParams;
use crate::pooling::PoolingMode;
use crate::trainer::{AdamState, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Trainer position needed to continue a run exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerProgress {
    pub iteration: u64,
    pub mining_rounds: u64,
    /// Pool samples drawn so far, including empty ones.
    pub mining_draws: u64,
    pub pool_size: usize,
    pub cursor: usize,
    pub batches: Vec<Vec<Triplet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub clusters: usize,
    pub dim: usize,
    pub margin: f64,
    pub pooling: PoolingMode,
    pub iteration: u64,
    pub seed: u64,
    /// Softmax sharpness chosen at k-means initialization, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<TrainerProgress>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: VladParams,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// A freshly initialized model with no optimizer state.
    pub fn initial(
        params: VladParams,
        pooling: PoolingMode,
        margin: f64,
        seed: u64,
        init_alpha: Option<f64>,
    ) -> Self {
        let meta = CheckpointMeta {
            format: FORMAT_VERSION,
            clusters: params.clusters(),
            dim: params.dim(),
            margin,
            pooling,
            iteration: 0,
            seed,
            init_alpha,
            adam_step: None,
            progress: None,
        };
        Self {
            params,
            optimizer: None,
            meta,
        }
    }

    pub fn from_training(
        params: &VladParams,
        adam: &AdamState,
        config: &TrainConfig,
        progress: TrainerProgress,
    ) -> Self {
        let meta = CheckpointMeta {
            format: FORMAT_VERSION,
            clusters: params.clusters(),
            dim: params.dim(),
            margin: config.margin,
            pooling: config.pooling,
            iteration: progress.iteration,
            seed: config.seed,
            init_alpha: None,
            adam_step: Some(adam.step),
            progress: Some(progress),
        };
        Self {
            params: params.clone(),
            optimizer: Some(adam.clone()),
            meta,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_params(dir, "", &self.params)?;
        if let Some(adam) = &self.optimizer {
            write_params(dir, "adam_m_", &adam.first_moment)?;
            write_params(dir, "adam_v_", &adam.second_moment)?;
        }
        let mut meta = self.meta.clone();
        meta.adam_step = self.optimizer.as_ref().map(|a| a.step);
        let mut json = serde_json::to_string_pretty(&meta)?;
        json.push('\n');
        let path = dir.join("meta.json");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                meta.format
            )));
        }
        let params = read_params(dir, "", meta.clusters, meta.dim)?;
        let optimizer = match meta.adam_step {
            Some(step) => Some(AdamState {
                first_moment: read_params(dir, "adam_m_", meta.clusters, meta.dim)?,
                second_moment: read_params(dir, "adam_v_", meta.clusters, meta.dim)?,
                step,
            }),
            None => None,
        };
        Ok(Self {
            params,
            optimizer,
            meta,
        })
    }
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

fn write_params(dir: &Path, prefix: &str, params: &VladParams) -> Result<()> {
    let (k, d) = (params.clusters(), params.dim());
    write_tensor(
        dir.join(format!("{prefix}centers.msvf")),
        &[k, d],
        &to_f32(&params.centers),
    )?;
    write_tensor(
        dir.join(format!("{prefix}weights.msvf")),
        &[k, d],
        &to_f32(&params.weights),
    )?;
    write_tensor(
        dir.join(format!("{prefix}biases.msvf")),
        &[k],
        &to_f32(&params.biases),
    )
}

fn read_params(dir: &Path, prefix: &str, clusters: usize, dim: usize) -> Result<VladParams> {
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let tensor = read_tensor(dir.join(format!("{prefix}{name}.msvf")))?;
        if tensor.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{prefix}{name} has shape {:?}, meta.json says {shape:?}",
                tensor.shape
            )));
        }
        Ok(tensor.values.iter().map(|&v| f64::from(v)).collect())
    };
    VladParams::new(
        clusters,
        dim,
        read("centers", &[clusters, dim])?,
        read("weights", &[clusters, dim])?,
        read("biases", &[clusters])?,
    )
}
