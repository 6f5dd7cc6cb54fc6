//! Image descriptors from multi-scale max-pooled convolutional column
//! features aggregated by a trainable NetVLAD layer.
//!
//! The pipeline starts from backbone activations stored as `.msvf` tensor
//! files:
//!
//! 1. [`pooling`] max-pools each feature map with 2×2 and 3×3 stride-1
//!    windows and collects the column features of both pooled maps;
//! 2. [`netvlad`] aggregates the columns into a `K·D` descriptor;
//! 3. [`mining`] and [`trainer`] learn the NetVLAD parameters with a triplet
//!    ranking loss on periodically mined semi-hard and hard triplets;
//! 4. [`retrieval`] builds an exact search index and computes mAP.

pub mod error;
pub mod feature_map;
pub mod gradcheck;
pub mod io;
pub mod mining;
pub mod netvlad;
pub mod pooling;
pub mod retrieval;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use feature_map::FeatureMap;
pub use io::{Checkpoint, DatasetManifest, Split};
pub use mining::{
    classify_triplet, mine_triplets, rank_neighbors, Difficulty, MiningConfig, Triplet,
};
pub use netvlad::{
    describe_image, kmeans_init, vlad_backward, vlad_forward, Descriptor, VladParams,
};
pub use pooling::{multiscale_columns, ColumnFeatureSet, PoolingMode};
pub use retrieval::{
    average_precision, build_index, combine_multires, evaluate, query_index, DescriptorIndex,
    EvalReport,
};
pub use trainer::{train, TrainConfig, Trainer, TrainingSet};
