//! Three-stream training with shared NetVLAD parameters.
//!
//! Query, positive and negative are described by the same parameter set; the
//! loss gradient of each stream is pulled back through its own forward cache
//! and the three contributions are summed. Triplets are re-mined every
//! `mining_interval` iterations from descriptors computed with the current
//! parameters.

pub mod adam;
pub mod loss;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::io::checkpoint::{Checkpoint, TrainerProgress};
use crate::io::manifest::{DatasetManifest, Split};
use crate::mining::{
    batch_triplets, mine_triplets_with, sample_mining_pool, MiningConfig, Triplet,
};
use crate::netvlad::{describe_columns, vlad_backward, vlad_forward, VladParams};
use crate::pooling::{multiscale_columns, ColumnFeatureSet, PoolingMode};
use crate::rng;

pub use adam::{adam_step, AdamState};
pub use loss::{triplet_loss, TripletLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Triplet margin. Also used as the mining margin (overrides
    /// `mining.margin`).
    pub margin: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Epoch (counted in mining rounds, see [`Trainer::epoch`]) from which
    /// `lr_final` is used.
    pub lr_drop_epoch: u64,
    pub iterations: u64,
    pub mining_interval: u64,
    pub mining: MiningConfig,
    pub pooling: PoolingMode,
    /// Training resolution: which manifest entries are used.
    pub resolution: u32,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 emits only the last.
    pub checkpoint_every: u64,
    /// Consecutive empty mining pools tolerated before aborting.
    pub max_empty_pools: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            lr_initial: 1e-5,
            lr_final: 1e-6,
            lr_drop_epoch: 3,
            iterations: 1000,
            mining_interval: 8,
            mining: MiningConfig::default(),
            pooling: PoolingMode::Both,
            resolution: 336,
            seed: 0,
            checkpoint_every: 0,
            max_empty_pools: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final && self.lr_initial.is_finite())
        {
            return Err(Error::Config("need lr_initial >= lr_final > 0".into()));
        }
        if self.mining_interval < 1 {
            return Err(Error::Config("mining_interval must be at least 1".into()));
        }
        if self.max_empty_pools < 1 {
            return Err(Error::Config("max_empty_pools must be at least 1".into()));
        }
        self.mining_config().validate()
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            margin: self.margin,
            seed: self.seed,
            ..self.mining.clone()
        }
    }
}

/// Pre-pooled training images. The backbone is fixed, so column features
/// are computed once.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub labels: Vec<i64>,
    pub columns: Vec<ColumnFeatureSet>,
    pub pooling: PoolingMode,
}

impl TrainingSet {
    pub fn from_maps(
        ids: Vec<String>,
        labels: Vec<i64>,
        maps: &[FeatureMap],
        pooling: PoolingMode,
    ) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != maps.len() {
            return Err(Error::dim("ids, labels and maps must align"));
        }
        let columns = maps
            .par_iter()
            .map(|m| multiscale_columns(m, pooling))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids,
            labels,
            columns,
            pooling,
        })
    }

    /// Train-split entries at `resolution`, in manifest order.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        resolution: u32,
        pooling: PoolingMode,
    ) -> Result<Self> {
        let entries: Vec<_> = manifest
            .split(Split::Train)
            .filter(|e| e.resolution == resolution)
            .collect();
        if entries.is_empty() {
            return Err(Error::Config(format!(
                "manifest has no train images at resolution {resolution}"
            )));
        }
        let maps = entries
            .par_iter()
            .map(|e| manifest.load_map(e))
            .collect::<Result<Vec<_>>>()?;
        Self::from_maps(
            entries.iter().map(|e| e.id.clone()).collect(),
            entries.iter().map(|e| e.label).collect(),
            &maps,
            pooling,
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns.first().map_or(0, ColumnFeatureSet::dim)
    }
}

/// Loss of one triplet and its gradient with respect to the shared
/// parameters.
pub fn triplet_gradient(
    params: &VladParams,
    query: &ColumnFeatureSet,
    positive: &ColumnFeatureSet,
    negative: &ColumnFeatureSet,
    margin: f64,
) -> Result<(f64, VladParams)> {
    let (q, q_cache) = vlad_forward(query, params, false)?;
    let (p, p_cache) = vlad_forward(positive, params, false)?;
    let (n, n_cache) = vlad_forward(negative, params, false)?;
    let loss = triplet_loss(&q.values, &p.values, &n.values, margin)?;
    let mut grads = VladParams::zeros(params.clusters(), params.dim());
    if loss.loss > 0.0 {
        for (cache, grad) in [
            (&q_cache, &loss.grad_q),
            (&p_cache, &loss.grad_p),
            (&n_cache, &loss.grad_n),
        ] {
            let (g, _) = vlad_backward(cache, params, grad)?;
            grads.add_scaled(&g, 1.0);
        }
    }
    Ok((loss.loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub triplet_pool_size: usize,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str = "iteration,loss,lr,triplet_pool_size";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iteration, self.loss, self.lr, self.triplet_pool_size
        )
    }
}

fn round_to_f32(params: &mut VladParams) {
    params.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// Training state machine. Parameters and Adam moments are kept at float32
/// precision so that a checkpoint captures the state exactly.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a TrainingSet,
    params: VladParams,
    adam: AdamState,
    progress: TrainerProgress,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingSet, config: TrainConfig, mut params: VladParams) -> Result<Self> {
        config.validate()?;
        if data.pooling != config.pooling {
            return Err(Error::Config(format!(
                "training set pooled with {}, config asks for {}",
                data.pooling, config.pooling
            )));
        }
        if data.dim() != params.dim() {
            return Err(Error::dim(format!(
                "training features have {} channels, parameters expect {}",
                data.dim(),
                params.dim()
            )));
        }
        round_to_f32(&mut params);
        let adam = AdamState::new(&params);
        Ok(Self {
            config,
            data,
            params,
            adam,
            progress: TrainerProgress::default(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        data: &'a TrainingSet,
        config: TrainConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        let meta = &checkpoint.meta;
        if meta.pooling != config.pooling || meta.margin != config.margin {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with pooling {} and margin {}, config has {} and {}",
                meta.pooling, meta.margin, config.pooling, config.margin
            )));
        }
        let mut trainer = Self::new(data, config, checkpoint.params)?;
        if let Some(adam) = checkpoint.optimizer {
            trainer.adam = adam;
        }
        if let Some(progress) = checkpoint.meta.progress {
            if progress
                .batches
                .iter()
                .flatten()
                .any(|t| t.q.max(t.p).max(t.n) >= data.len())
            {
                return Err(Error::Checkpoint(
                    "pending triplets reference unknown images".into(),
                ));
            }
            trainer.progress = progress;
        }
        Ok(trainer)
    }

    pub fn params(&self) -> &VladParams {
        &self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn iteration(&self) -> u64 {
        self.progress.iteration
    }

    pub fn mining_rounds(&self) -> u64 {
        self.progress.mining_rounds
    }

    pub fn pending_batches(&self) -> &[Vec<Triplet>] {
        &self.progress.batches
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Zero-based epoch of the current mining round. One epoch is
    /// `ceil(training images / mining_batch_size)` rounds.
    pub fn epoch(&self) -> u64 {
        let per_epoch = self
            .data
            .len()
            .div_ceil(self.config.mining.mining_batch_size)
            .max(1) as u64;
        self.progress.mining_rounds.saturating_sub(1) / per_epoch
    }

    pub fn learning_rate(&self) -> f64 {
        if self.epoch() >= self.config.lr_drop_epoch {
            self.config.lr_final
        } else {
            self.config.lr_initial
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_training(
            &self.params,
            &self.adam,
            &self.config,
            self.progress.clone(),
        )
    }

    /// Descriptors of the given training images under the current
    /// parameters, without power normalization.
    pub fn describe(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        indices
            .par_iter()
            .map(|&i| {
                describe_columns(&self.data.columns[i], &self.params, false).map(|d| d.values)
            })
            .collect()
    }

    /// Samples a pool, mines it with the current parameters and replaces
    /// the pending mini-batches. Retries with a new sample when nothing is
    /// found.
    pub fn mine(&mut self) -> Result<()> {
        let mining = self.config.mining_config();
        let mut empty = 0;
        loop {
            let draw = self.progress.mining_draws;
            self.progress.mining_draws += 1;
            let mut pool_rng = rng::stream(self.config.seed, rng::MINING_POOL, draw);
            let (indices, labels) = sample_mining_pool(&self.data.labels, &mining, &mut pool_rng)?;
            let descriptors = self.describe(&indices)?;
            let mut coin = rng::stream(self.config.seed, rng::MINING_COIN, draw);
            let triplets: Vec<Triplet> =
                mine_triplets_with(&descriptors, &labels, &mining, &mut coin)?
                    .into_iter()
                    .map(|t| Triplet {
                        q: indices[t.q],
                        p: indices[t.p],
                        n: indices[t.n],
                        ..t
                    })
                    .filter(|t| t.q != t.p)
                    .collect();
            if !triplets.is_empty() {
                let mut shuffle = rng::stream(self.config.seed, rng::BATCHING, draw);
                self.progress.pool_size = triplets.len();
                self.progress.batches =
                    batch_triplets(&triplets, mining.mini_batch_size, &mut shuffle);
                self.progress.cursor = 0;
                self.progress.mining_rounds += 1;
                debug!(
                    "mining round {}: {} triplets in {} mini-batches",
                    self.progress.mining_rounds,
                    triplets.len(),
                    self.progress.batches.len()
                );
                return Ok(());
            }
            empty += 1;
            warn!("mining draw {draw} produced no triplets ({empty} in a row), re-sampling");
            if empty >= self.config.max_empty_pools {
                return Err(Error::EmptyTripletPool { attempts: empty });
            }
        }
    }

    /// Mean loss and mean gradient over one mini-batch.
    pub fn batch_gradient(&self, batch: &[Triplet]) -> Result<(f64, VladParams)> {
        let margin = self.config.margin;
        let cols = &self.data.columns;
        let parts = batch
            .par_iter()
            .map(|t| triplet_gradient(&self.params, &cols[t.q], &cols[t.p], &cols[t.n], margin))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads = VladParams::zeros(self.params.clusters(), self.params.dim());
        let mut loss = 0.0;
        // Summed in batch order for reproducibility.
        for (l, g) in &parts {
            loss += l;
            grads.add_scaled(g, scale);
        }
        Ok((loss * scale, grads))
    }

    /// One iteration: mine if due, take the next mini-batch, update.
    pub fn step(&mut self) -> Result<IterationLog> {
        if self
            .progress
            .iteration
            .is_multiple_of(self.config.mining_interval)
            || self.progress.batches.is_empty()
        {
            self.mine()?;
        }
        let count = self.progress.batches.len();
        let batch = self.progress.batches[self.progress.cursor % count].clone();
        self.progress.cursor = (self.progress.cursor + 1) % count;

        let (loss, grads) = self.batch_gradient(&batch)?;
        let lr = self.learning_rate();
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        round_to_f32(&mut self.params);
        round_to_f32(&mut self.adam.first_moment);
        round_to_f32(&mut self.adam.second_moment);
        self.progress.iteration += 1;
        Ok(IterationLog {
            iteration: self.progress.iteration,
            loss,
            lr,
            triplet_pool_size: self.progress.pool_size,
        })
    }

    /// Runs until `config.iterations`, reporting every iteration and every
    /// checkpoint due under the cadence (the final state always is).
    pub fn run(
        &mut self,
        mut on_log: impl FnMut(&IterationLog),
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        while self.progress.iteration < self.config.iterations {
            let log = self.step()?;
            on_log(&log);
            let every = self.config.checkpoint_every;
            let last = self.progress.iteration == self.config.iterations;
            if last || (every > 0 && self.progress.iteration.is_multiple_of(every)) {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }
}

/// Trains from `initial` and returns the per-iteration log and the final
/// checkpoint.
pub fn train(
    data: &TrainingSet,
    config: TrainConfig,
    initial: VladParams,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Vec<IterationLog>, Checkpoint)> {
    let mut trainer = Trainer::new(data, config, initial)?;
    let mut logs = Vec::new();
    trainer.run(|l| logs.push(*l), &mut on_checkpoint)?;
    Ok((logs, trainer.checkpoint()))
}
