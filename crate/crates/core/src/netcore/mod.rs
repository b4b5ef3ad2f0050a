//! Networks as sequences of smooth layers, with exact Jacobians.

pub mod layer;
pub mod network;
pub mod persist;
pub mod vit;

pub use layer::{Affine, LayerKind, LayerNorm, LayerSpec, MlpBlock, PatchEmbed, SelfAttention, LAYER_NORM_EPS};
pub use network::{Activations, Network, SegmentLayout, FULL_RANK_RTOL};
pub use persist::{load_model, model_checksum, round_to_f32, save_model, LayerShape, ModelManifest};
pub use vit::{build_tiny_vit, VitConfig, VIT_EMBED_BOUNDARY};
