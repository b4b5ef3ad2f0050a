//! Model files: a JSON manifest describing the layer stack plus a binary
//! blob of little-endian `f32` weights in declaration order.
//!
//! The manifest records the SHA-256 of the blob; loading refuses a blob
//! whose hash differs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::linalg::Matrix;

use super::layer::{LayerNorm, LayerSpec, MlpBlock, PatchEmbed, SelfAttention};
use super::network::{Network, SegmentLayout};

pub const MODEL_FORMAT: &str = "fiberwalk-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Hyperparameters and shapes of one layer, without its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerShape {
    Affine { d_in: usize, d_out: usize },
    Sigmoid,
    GeLU,
    Tanh,
    LayerNorm { width: usize, eps: f64 },
    Softmax { group: Option<usize> },
    SelfAttention { width: usize, heads: usize },
    ResidualAdd { inner: Vec<LayerShape> },
    MLPBlock { width: usize, hidden: usize },
    PatchEmbed { image_side: usize, patch: usize, width: usize },
    PositionalAdd { tokens: usize, width: usize },
    ClsPrepend { width: usize },
    ClsSelect { width: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutRecord {
    pub segments: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsRecord {
    /// Blob path relative to the manifest's directory.
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub embed_boundary: usize,
    pub layout: Option<LayoutRecord>,
    pub layers: Vec<LayerShape>,
    pub weights: WeightsRecord,
    /// Free-form provenance (builder config, training report, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl LayerShape {
    pub fn of(layer: &LayerSpec) -> LayerShape {
        match layer {
            LayerSpec::Affine(a) => LayerShape::Affine {
                d_in: a.weight.cols(),
                d_out: a.weight.rows(),
            },
            LayerSpec::Sigmoid => LayerShape::Sigmoid,
            LayerSpec::GeLU => LayerShape::GeLU,
            LayerSpec::Tanh => LayerShape::Tanh,
            LayerSpec::LayerNorm(ln) => LayerShape::LayerNorm {
                width: ln.width,
                eps: ln.eps,
            },
            LayerSpec::Softmax { group } => LayerShape::Softmax { group: *group },
            LayerSpec::SelfAttention(at) => LayerShape::SelfAttention {
                width: at.width,
                heads: at.heads,
            },
            LayerSpec::ResidualAdd(inner) => LayerShape::ResidualAdd {
                inner: inner.iter().map(LayerShape::of).collect(),
            },
            LayerSpec::MLPBlock(m) => LayerShape::MLPBlock {
                width: m.width,
                hidden: m.hidden,
            },
            LayerSpec::PatchEmbed(p) => LayerShape::PatchEmbed {
                image_side: p.image_side,
                patch: p.patch,
                width: p.width(),
            },
            LayerSpec::PositionalAdd(t) => LayerShape::PositionalAdd {
                tokens: t.rows(),
                width: t.cols(),
            },
            LayerSpec::ClsPrepend(t) => LayerShape::ClsPrepend { width: t.len() },
            LayerSpec::ClsSelect { width } => LayerShape::ClsSelect { width: *width },
        }
    }

    /// A layer of this shape with all parameters zero.
    pub fn zeroed(&self) -> LayerSpec {
        let z = |n: usize| vec![0.0; n];
        match *self {
            LayerShape::Affine { d_in, d_out } => LayerSpec::affine(Matrix::zeros(d_out, d_in), z(d_out)),
            LayerShape::Sigmoid => LayerSpec::Sigmoid,
            LayerShape::GeLU => LayerSpec::GeLU,
            LayerShape::Tanh => LayerSpec::Tanh,
            LayerShape::LayerNorm { width, eps } => LayerSpec::LayerNorm(LayerNorm {
                width,
                gain: z(width),
                bias: z(width),
                eps,
            }),
            LayerShape::Softmax { group } => LayerSpec::Softmax { group },
            LayerShape::SelfAttention { width, heads } => {
                let m = || Matrix::zeros(width, width);
                LayerSpec::SelfAttention(SelfAttention {
                    width,
                    heads,
                    wq: m(),
                    bq: z(width),
                    wk: m(),
                    bk: z(width),
                    wv: m(),
                    bv: z(width),
                    wo: m(),
                    bo: z(width),
                })
            }
            LayerShape::ResidualAdd { ref inner } => {
                LayerSpec::ResidualAdd(inner.iter().map(LayerShape::zeroed).collect())
            }
            LayerShape::MLPBlock { width, hidden } => LayerSpec::MLPBlock(MlpBlock {
                width,
                hidden,
                w1: Matrix::zeros(hidden, width),
                b1: z(hidden),
                w2: Matrix::zeros(width, hidden),
                b2: z(width),
            }),
            LayerShape::PatchEmbed {
                image_side,
                patch,
                width,
            } => LayerSpec::PatchEmbed(PatchEmbed {
                image_side,
                patch,
                weight: Matrix::zeros(width, patch * patch),
                bias: z(width),
            }),
            LayerShape::PositionalAdd { tokens, width } => {
                LayerSpec::PositionalAdd(Matrix::zeros(tokens, width))
            }
            LayerShape::ClsPrepend { width } => LayerSpec::ClsPrepend(z(width)),
            LayerShape::ClsSelect { width } => LayerSpec::ClsSelect { width },
        }
    }
}

/// Weights as little-endian `f32`, in [`Network::params`] order.
pub fn weight_blob(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(net.param_count() * 4);
    for tensor in net.params() {
        for &v in tensor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// SHA-256 of the weight blob; identifies a model independent of where it
/// is stored.
pub fn model_checksum(net: &Network) -> String {
    fsio::sha256_hex(&weight_blob(net))
}

/// Rounds every parameter to the nearest `f32`, i.e. to exactly what a
/// save/load cycle would produce.
pub fn round_to_f32(net: &mut Network) {
    for tensor in net.params_mut() {
        for v in tensor.iter_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

pub fn manifest_for(net: &Network, blob: &[u8], blob_file: &str, metadata: serde_json::Value) -> ModelManifest {
    ModelManifest {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_FORMAT_VERSION,
        input_dim: net.input_dim(),
        embed_boundary: net.embed_boundary(),
        layout: net.has_explicit_layout().then(|| {
            let l = net.layout();
            LayoutRecord {
                segments: l.segments,
                width: l.width,
            }
        }),
        layers: net.layers().iter().map(LayerShape::of).collect(),
        weights: WeightsRecord {
            file: blob_file.to_string(),
            count: blob.len() / 4,
            sha256: fsio::sha256_hex(blob),
        },
        metadata,
    }
}

/// Writes `<path>` (manifest) and a sibling `.bin` blob. Returns the blob
/// checksum.
pub fn save_model(net: &Network, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<String> {
    let path = path.as_ref();
    let blob = weight_blob(net);
    let blob_path = blob_path_for(path);
    let blob_name = blob_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = manifest_for(net, &blob, &blob_name, metadata);
    fsio::write_atomic(&blob_path, &blob)?;
    fsio::write_atomic(path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest.weights.sha256)
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ModelManifest> {
    let text = fsio::read_to_string(path)?;
    let m: ModelManifest = serde_json::from_str(&text)?;
    if m.format != MODEL_FORMAT || m.version != MODEL_FORMAT_VERSION {
        return Err(Error::format(
            "model manifest",
            format!("unsupported format {} v{}", m.format, m.version),
        ));
    }
    Ok(m)
}

/// Loads a model, verifying the blob checksum and weight count.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Network, ModelManifest)> {
    let path = path.as_ref();
    let manifest = load_manifest(path)?;
    let blob_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.weights.file);
    let blob = fsio::read(&blob_path)?;
    let actual = fsio::sha256_hex(&blob);
    if actual != manifest.weights.sha256 {
        return Err(Error::Checksum {
            path: blob_path,
            expected: manifest.weights.sha256.clone(),
            actual,
        });
    }
    let net = network_from_parts(&manifest, &blob)?;
    Ok((net, manifest))
}

pub fn network_from_parts(manifest: &ModelManifest, blob: &[u8]) -> Result<Network> {
    if blob.len() % 4 != 0 || blob.len() / 4 != manifest.weights.count {
        return Err(Error::format(
            "weight blob",
            format!(
                "{} bytes, manifest declares {} f32 values",
                blob.len(),
                manifest.weights.count
            ),
        ));
    }
    let mut layers: Vec<LayerSpec> = manifest.layers.iter().map(LayerShape::zeroed).collect();
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut filled = 0;
    for layer in &mut layers {
        for tensor in layer.params_mut() {
            for slot in tensor.iter_mut() {
                *slot = values.next().ok_or_else(|| {
                    Error::format("weight blob", "fewer values than the layer shapes need")
                })?;
                filled += 1;
            }
        }
    }
    if filled != manifest.weights.count {
        return Err(Error::format(
            "weight blob",
            format!("layer shapes need {filled} values, blob has {}", manifest.weights.count),
        ));
    }
    let mut net = Network::new(manifest.input_dim, layers)?.with_embed_boundary(manifest.embed_boundary)?;
    if let Some(l) = &manifest.layout {
        net = net.with_layout(l.segments, l.width)?;
    }
    Ok(net)
}

impl From<SegmentLayout> for LayoutRecord {
    fn from(l: SegmentLayout) -> Self {
        LayoutRecord {
            segments: l.segments,
            width: l.width,
        }
    }
}
