//! Small vision transformer for square grayscale images.
//!
//! Layout: `PatchEmbed → PositionalAdd → | ClsPrepend → [pre-norm attention
//! block, pre-norm MLP block] × depth → ClsSelect → LayerNorm → Affine`.
//! The embed boundary (`|`) sits after the positional add, so the space the
//! explorers walk in is the `n_patches × hidden` embedding matrix.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

use super::layer::{LayerSpec, MlpBlock, PatchEmbed, SelfAttention};
use super::network::Network;

/// Index of the embedding manifold in every network built here.
pub const VIT_EMBED_BOUNDARY: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_side: usize,
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub classes: usize,
    /// MLP width as a multiple of `hidden`.
    pub mlp_ratio: usize,
    pub init_seed: u64,
}

impl VitConfig {
    /// Default working configuration: 2 blocks, 2 heads, hidden 8 on 4×4
    /// patches of a 28×28 image, giving a 392-dimensional embedding space.
    pub fn desk() -> Self {
        VitConfig {
            image_side: 28,
            patch: 4,
            hidden: 8,
            depth: 2,
            heads: 2,
            classes: 10,
            mlp_ratio: 4,
            init_seed: 0,
        }
    }

    /// Hidden size equal to the patch pixel count, so the patch projection
    /// is square and exactly invertible.
    pub fn invertible() -> Self {
        VitConfig {
            hidden: 16,
            ..VitConfig::desk()
        }
    }

    /// 4 blocks with 4 heads on 2×2 patches (a 14×14 patch grid).
    pub fn large() -> Self {
        VitConfig {
            patch: 2,
            hidden: 4,
            depth: 4,
            heads: 4,
            ..VitConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "invertible" => Some(Self::invertible()),
            "large" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn embed_dim(&self) -> usize {
        self.num_patches() * self.hidden
    }

    pub fn build(&self) -> Result<Network> {
        self.check()?;
        let mut init = rng::stream(self.init_seed, "vit-init");
        let h = self.hidden;
        let pp = self.patch * self.patch;
        let n_s = self.num_patches();
        let mlp = self.mlp_ratio * h;

        let mut layers = vec![
            LayerSpec::PatchEmbed(PatchEmbed {
                image_side: self.image_side,
                patch: self.patch,
                weight: gaussian(&mut init, h, pp, (1.0 / pp as f64).sqrt()),
                bias: vec![0.0; h],
            }),
            LayerSpec::PositionalAdd(gaussian(&mut init, n_s, h, 0.02)),
            LayerSpec::ClsPrepend(gaussian(&mut init, 1, h, 0.02).into_vec()),
        ];
        let proj_std = (1.0 / h as f64).sqrt();
        for _ in 0..self.depth {
            layers.push(LayerSpec::ResidualAdd(vec![
                LayerSpec::layer_norm(h),
                LayerSpec::SelfAttention(SelfAttention {
                    width: h,
                    heads: self.heads,
                    wq: gaussian(&mut init, h, h, proj_std),
                    bq: vec![0.0; h],
                    wk: gaussian(&mut init, h, h, proj_std),
                    bk: vec![0.0; h],
                    wv: gaussian(&mut init, h, h, proj_std),
                    bv: vec![0.0; h],
                    wo: gaussian(&mut init, h, h, proj_std),
                    bo: vec![0.0; h],
                }),
            ]));
            layers.push(LayerSpec::ResidualAdd(vec![
                LayerSpec::layer_norm(h),
                LayerSpec::MLPBlock(MlpBlock {
                    width: h,
                    hidden: mlp,
                    w1: gaussian(&mut init, mlp, h, proj_std),
                    b1: vec![0.0; mlp],
                    w2: gaussian(&mut init, h, mlp, (1.0 / mlp as f64).sqrt()),
                    b2: vec![0.0; h],
                }),
            ]));
        }
        layers.push(LayerSpec::ClsSelect { width: h });
        layers.push(LayerSpec::layer_norm(h));
        layers.push(LayerSpec::affine(
            gaussian(&mut init, self.classes, h, proj_std),
            vec![0.0; self.classes],
        ));

        let mut net = Network::new(self.image_side * self.image_side, layers)?
            .with_embed_boundary(VIT_EMBED_BOUNDARY)?
            .with_layout(n_s, h)?;
        // start from weights a saved model can represent exactly
        super::persist::round_to_f32(&mut net);
        Ok(net)
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.patch == 0 || self.image_side == 0 || self.image_side % self.patch != 0 {
            return bad(format!(
                "image side {} must be a positive multiple of patch {}",
                self.image_side, self.patch
            ));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.classes == 0 || self.mlp_ratio == 0 {
            return bad("classes and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Builds a freshly initialized tiny ViT with the default MLP ratio and
/// init seed.
pub fn build_tiny_vit(
    patch_size: usize,
    hidden: usize,
    layers: usize,
    heads: usize,
    classes: usize,
    image_side: usize,
) -> Result<Network> {
    VitConfig {
        image_side,
        patch: patch_size,
        hidden,
        depth: layers,
        heads,
        classes,
        ..VitConfig::desk()
    }
    .build()
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}
