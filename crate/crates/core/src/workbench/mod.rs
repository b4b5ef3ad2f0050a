//! Data, training and bookkeeping around the geometry: MNIST-style IDX
//! files, a small trainer for the ViT presets, the intensity-variance
//! filter, and run manifests.

mod filter;
mod idx;
mod manifest;
mod train;

pub use filter::{variance_filter, FilterStats, DEFAULT_VARIANCE_THRESHOLD};
pub use idx::{load_idx, load_idx_prefix, write_idx, Dataset};
pub use manifest::{config_hash, output_root, RunManifest, OUTPUT_DIR_ENV};
pub use train::{accuracy, train_tiny_vit, EpochStats, Optimizer, TrainConfig, TrainReport};
