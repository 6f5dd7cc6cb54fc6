//! On-disk formats: tensor files, dataset manifests and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use manifest::{
    load_manifest, parse_manifest, DatasetManifest, ManifestEntry, Relevance, Split,
};
pub use tensor::{read_tensor, write_tensor, Tensor};
