//! Seeded synthetic fixtures: class-structured feature maps and labelled
//! Gaussian descriptor clouds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::io::checkpoint::Checkpoint;
use crate::io::manifest::{DatasetManifest, ManifestEntry, Relevance, Split};
use crate::mining::MiningConfig;
use crate::netvlad::{describe_image, kmeans_init, sample_columns, VladParams};
use crate::pooling::PoolingMode;
use crate::retrieval::{evaluate_descriptors, DescriptorIndex, EvalReport};
use crate::trainer::{IterationLog, TrainConfig, Trainer, TrainingSet};

/// Non-negative feature maps: a square object blob at a random position
/// shows the class prototype, every other cell shows one of a few shared
/// background patterns. Both are perturbed by Gaussian noise and clipped
/// at zero, like rectified convolutional activations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Side of the square object blob, in cells.
    pub object_size: usize,
    /// Per-channel scale of the class prototypes.
    pub prototype_scale: f64,
    pub object_noise: f64,
    /// Shared background patterns.
    pub backgrounds: usize,
    /// Per-channel scale of the background patterns.
    pub background_scale: f64,
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 32,
            images_per_class: 16,
            height: 12,
            width: 12,
            channels: 16,
            object_size: 2,
            prototype_scale: 1.0,
            object_noise: 0.3,
            backgrounds: 1,
            background_scale: 1.0,
            background_noise: 0.6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneImage {
    pub id: String,
    pub label: i64,
    pub map: FeatureMap,
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect()
}

/// Images ordered by class, then index within the class.
pub fn generate_scenes(spec: &SceneSpec) -> Result<Vec<SceneImage>> {
    if spec.classes == 0
        || spec.images_per_class == 0
        || spec.backgrounds == 0
        || spec.channels == 0
    {
        return Err(Error::Config("scene spec counts must be positive".into()));
    }
    if spec.object_size == 0 || spec.object_size > spec.height.min(spec.width) {
        return Err(Error::Config(format!(
            "a {0}x{0} object does not fit a {1}x{2} map",
            spec.object_size, spec.height, spec.width
        )));
    }
    let (h, w, c, s) = (spec.height, spec.width, spec.channels, spec.object_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            gaussian(&mut rng, c, spec.prototype_scale)
                .into_iter()
                .map(f64::abs)
                .collect()
        })
        .collect();
    let backgrounds: Vec<Vec<f64>> = (0..spec.backgrounds)
        .map(|_| gaussian(&mut rng, c, spec.background_scale))
        .collect();

    let mut images = Vec::with_capacity(spec.classes * spec.images_per_class);
    for (class, prototype) in prototypes.iter().enumerate() {
        for i in 0..spec.images_per_class {
            let (top, left) = (rng.random_range(0..=h - s), rng.random_range(0..=w - s));
            let mut values = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    let inside = (top..top + s).contains(&y) && (left..left + s).contains(&x);
                    let (base, noise) = if inside {
                        (prototype, spec.object_noise)
                    } else {
                        (
                            &backgrounds[rng.random_range(0..spec.backgrounds)],
                            spec.background_noise,
                        )
                    };
                    // Stored maps are float32, so keep the in-memory copy identical.
                    values.extend(
                        base.iter()
                            .zip(gaussian(&mut rng, c, noise))
                            .map(|(b, n)| f64::from((b + n).max(0.0) as f32)),
                    );
                }
            }
            images.push(SceneImage {
                id: format!("c{class:03}_{i:02}"),
                label: class as i64,
                map: FeatureMap::new(h, w, c, values)?,
            });
        }
    }
    Ok(images)
}

/// Per-class split sizes: the first `query` images of each class are
/// queries, the next `gallery` are gallery images, the rest train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub query: usize,
    pub gallery: usize,
}

impl SplitPlan {
    pub fn split_of(&self, index_in_class: usize) -> Split {
        if index_in_class < self.query {
            Split::Query
        } else if index_in_class < self.query + self.gallery {
            Split::Gallery
        } else {
            Split::Train
        }
    }
}

/// A dataset held in memory with its split assignment and relevance.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub images: Vec<SceneImage>,
    pub splits: Vec<Split>,
}

impl SceneDataset {
    pub fn generate(spec: &SceneSpec, plan: SplitPlan) -> Result<Self> {
        if plan.query + plan.gallery >= spec.images_per_class {
            return Err(Error::Config("split plan leaves no training images".into()));
        }
        let images = generate_scenes(spec)?;
        let splits = (0..images.len())
            .map(|i| plan.split_of(i % spec.images_per_class))
            .collect();
        Ok(Self { images, splits })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Every gallery image of the query's class is a positive; nothing is
    /// junk.
    pub fn relevance(&self) -> std::collections::BTreeMap<String, Relevance> {
        let gallery = self.indices(Split::Gallery);
        self.indices(Split::Query)
            .into_iter()
            .map(|q| {
                let label = self.images[q].label;
                let positives = gallery
                    .iter()
                    .filter(|&&g| self.images[g].label == label)
                    .map(|&g| self.images[g].id.clone())
                    .collect();
                (
                    self.images[q].id.clone(),
                    Relevance {
                        positives,
                        junk: Default::default(),
                    },
                )
            })
            .collect()
    }

    /// Writes `maps/<id>.msvf` and `manifest.jsonl` under `dir` and returns
    /// the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>, resolution: u32) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let maps = dir.join("maps");
        fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
        let mut entries = Vec::with_capacity(self.images.len());
        for (image, &split) in self.images.iter().zip(&self.splits) {
            let rel = PathBuf::from("maps").join(format!("{}.msvf", image.id));
            image.map.save(dir.join(&rel))?;
            entries.push(ManifestEntry {
                id: image.id.clone(),
                label: image.label,
                split,
                resolution,
                path: rel,
            });
        }
        entries.sort();
        let manifest = DatasetManifest {
            base_dir: dir.to_path_buf(),
            entries,
            relevance: self.relevance(),
            channels: self.images.first().map(|i| i.map.channels()),
        };
        let path = dir.join("manifest.jsonl");
        fs::write(&path, manifest.to_jsonl()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl SceneDataset {
    pub fn training_set(&self, mode: PoolingMode) -> Result<TrainingSet> {
        let train = self.indices(Split::Train);
        let maps: Vec<FeatureMap> = train.iter().map(|&i| self.images[i].map.clone()).collect();
        TrainingSet::from_maps(
            train.iter().map(|&i| self.images[i].id.clone()).collect(),
            train.iter().map(|&i| self.images[i].label).collect(),
            &maps,
            mode,
        )
    }

    /// Held-out mAP: queries against the gallery.
    pub fn evaluate(&self, params: &VladParams, mode: PoolingMode) -> Result<EvalReport> {
        let describe = |split: Split| -> Result<Vec<(String, crate::netvlad::Descriptor)>> {
            self.indices(split)
                .par_iter()
                .map(|&i| {
                    let image = &self.images[i];
                    Ok((
                        image.id.clone(),
                        describe_image(std::slice::from_ref(&image.map), mode, params, false)?,
                    ))
                })
                .collect()
        };
        let (ids, descriptors) = describe(Split::Gallery)?.into_iter().unzip();
        let index = DescriptorIndex::new(ids, descriptors)?;
        evaluate_descriptors(&index, &describe(Split::Query)?, &self.relevance())
    }
}

/// Outcome of [`run_learning`].
#[derive(Debug, Clone)]
pub struct LearningRun {
    pub initial: VladParams,
    pub untrained: EvalReport,
    pub trained: EvalReport,
    pub logs: Vec<IterationLog>,
    pub checkpoint: Checkpoint,
    /// Iteration at which mining stopped finding triplets, if it did.
    pub separated_at: Option<u64>,
}

impl LearningRun {
    /// Mean loss over the first `window` iterations.
    pub fn initial_loss(&self, window: usize) -> f64 {
        mean(self.logs.iter().take(window).map(|l| l.loss))
    }

    /// Mean loss over the last `window` iterations.
    pub fn final_loss(&self, window: usize) -> f64 {
        mean(self.logs.iter().rev().take(window).map(|l| l.loss))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scene fixture used for end-to-end learning checks: 32 classes of 16
/// images, 12×12×16 maps, one query and five gallery images per class.
///
/// The background is a single noisy pattern covering most cells. K-means
/// spends most clusters on it, and their intra-normalized residuals are pure
/// noise, so the initialized model retrieves poorly until training moves
/// those centers off the background mean.
pub fn learning_fixture(seed: u64) -> Result<SceneDataset> {
    SceneDataset::generate(
        &SceneSpec {
            seed,
            ..SceneSpec::default()
        },
        SplitPlan {
            query: 1,
            gallery: 5,
        },
    )
}

/// Training configuration paired with [`learning_fixture`].
pub fn learning_config(mode: PoolingMode, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_initial: 4e-2,
        lr_final: 4e-3,
        lr_drop_epoch: 50,
        iterations: 500,
        mining_interval: 8,
        mining: MiningConfig {
            mining_batch_size: 320,
            num_classes: 32,
            mini_batch_size: 24,
            ..MiningConfig::default()
        },
        pooling: mode,
        seed,
        ..TrainConfig::default()
    }
}

/// Clusters and k-means sample size for [`learning_fixture`].
pub const LEARNING_CLUSTERS: usize = 8;
pub const LEARNING_KMEANS_SAMPLES: usize = 20_000;

/// K-means initialization on training columns, training, and held-out
/// evaluation before and after.
///
/// Training that runs out of triplets because every training query already
/// satisfies the margin is reported through `separated_at` and evaluated
/// with the parameters reached so far.
pub fn run_learning(
    ds: &SceneDataset,
    config: TrainConfig,
    clusters: usize,
    kmeans_samples: usize,
) -> Result<LearningRun> {
    let data = ds.training_set(config.pooling)?;
    let samples = sample_columns(&data.columns, kmeans_samples, config.seed)?;
    let initial = kmeans_init(
        &samples,
        clusters,
        config.seed,
        crate::netvlad::kmeans::DEFAULT_MAX_ITERS,
    )?;
    let untrained = ds.evaluate(&initial, config.pooling)?;
    let mode = config.pooling;
    let iterations = config.iterations;
    let mut trainer = Trainer::new(&data, config, initial.clone())?;
    let mut logs = Vec::new();
    let mut separated_at = None;
    while trainer.iteration() < iterations {
        match trainer.step() {
            Ok(log) => logs.push(log),
            Err(Error::EmptyTripletPool { .. }) => {
                separated_at = Some(trainer.iteration());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let checkpoint = trainer.checkpoint();
    let trained = ds.evaluate(&checkpoint.params, mode)?;
    Ok(LearningRun {
        initial,
        untrained,
        trained,
        logs,
        checkpoint,
        separated_at,
    })
}

/// `classes` Gaussian class centers of norm about one in `dim` dimensions,
/// each with `per_class` samples of per-coordinate spread `noise`.
/// Descriptors are L2-normalized; samples are ordered by class.
pub fn gaussian_descriptors(
    classes: usize,
    per_class: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center_scale = 1.0 / (dim as f64).sqrt();
    let mut descriptors = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let center = gaussian(&mut rng, dim, center_scale);
        for _ in 0..per_class {
            let mut v: Vec<f64> = center
                .iter()
                .zip(gaussian(&mut rng, dim, noise * center_scale))
                .map(|(c, n)| c + n)
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            descriptors.push(v);
            labels.push(class as i64);
        }
    }
    (descriptors, labels)
}
