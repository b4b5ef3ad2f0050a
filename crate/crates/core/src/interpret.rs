//! Turning explored embeddings back into images: cap to the range seen on
//! real data, undo the positional table and the patch projection, and paste
//! the selected patches into the original image.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{check_len, Error, Result};
use crate::explore::{FeasibleBounds, Trajectory};
use crate::fsio;
use crate::linalg::{pseudoinverse, singular_values, Matrix};
use crate::netcore::{LayerSpec, Network, PatchEmbed, FULL_RANK_RTOL};
use crate::raster::GrayImage;

/// Per-dimension envelope of the embeddings of `images`.
pub fn embedding_bounds(images: &[Vec<f64>], net: &Network) -> Result<FeasibleBounds> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("embedding bounds need at least one image".into()));
    };
    let e = net.embed(first)?;
    let (mut lower, mut upper) = (e.clone(), e);
    for img in &images[1..] {
        let e = net.embed(img)?;
        for (i, v) in e.into_iter().enumerate() {
            lower[i] = lower[i].min(v);
            upper[i] = upper[i].max(v);
        }
    }
    FeasibleBounds::new(lower, upper)
}

/// Left inverse of the embedding map of a patch-based network.
#[derive(Clone, Debug)]
pub struct PatchDecoder {
    patch: PatchEmbed,
    /// `patch² × width`
    pinv: Matrix,
    positional: Option<Matrix>,
}

impl PatchDecoder {
    /// Fails if the network has no patch embedding, or if its projection is
    /// rank-deficient.
    pub fn new(net: &Network) -> Result<Self> {
        let (index, patch) = net.layers()[..net.embed_boundary()]
            .iter()
            .enumerate()
            .find_map(|(i, l)| match l {
                LayerSpec::PatchEmbed(p) => Some((i, p.clone())),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidArgument("network has no patch embedding before its embed boundary".into()))?;
        let sv = singular_values(&patch.weight);
        let (largest, smallest) = (sv[0], *sv.last().unwrap());
        if !(smallest > FULL_RANK_RTOL * largest) {
            return Err(Error::RankDeficient { index, smallest, largest });
        }
        let pinv = pseudoinverse(&patch.weight, FULL_RANK_RTOL);
        let positional = net.positional_table().cloned();
        let width = patch.width();
        if net.embed_dim() != patch.num_patches() * width {
            return Err(Error::InvalidArgument(
                "embedding space is not the patch grid; cannot decode".into(),
            ));
        }
        Ok(PatchDecoder { patch, pinv, positional })
    }

    pub fn patch_embed(&self) -> &PatchEmbed {
        &self.patch
    }

    /// Patch pixels (`n_patches × patch²`, row-major inside each patch)
    /// recovered from an embedding, before clamping.
    pub fn decode_raw(&self, e: &[f64]) -> Result<Matrix> {
        let h = self.patch.width();
        let n = self.patch.num_patches();
        check_len("embedding", n * h, e.len())?;
        let pp = self.patch.patch_pixels();
        let mut out = Matrix::zeros(n, pp);
        let mut row = vec![0.0; h];
        for s in 0..n {
            for j in 0..h {
                let pos = self.positional.as_ref().map_or(0.0, |t| t[(s, j)]);
                row[j] = e[s * h + j] - pos - self.patch.bias[j];
            }
            let pixels = self.pinv.matvec(&row);
            for (k, v) in pixels.into_iter().enumerate() {
                out[(s, k)] = v;
            }
        }
        Ok(out)
    }

    /// [`PatchDecoder::decode_raw`] clamped to `[0, 1]`.
    pub fn decode(&self, e: &[f64]) -> Result<Matrix> {
        let mut m = self.decode_raw(e)?;
        m.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(m)
    }

    /// Copies the decoded patches listed in `selection` (all of them for
    /// `None`) into a copy of `original`.
    pub fn splice(&self, patches: &Matrix, original: &[f64], selection: Option<&[usize]>) -> Result<Vec<f64>> {
        check_len("original image", self.patch.image_side * self.patch.image_side, original.len())?;
        let n = self.patch.num_patches();
        let mut img = original.to_vec();
        let all: Vec<usize>;
        let segments = match selection {
            Some(s) => s,
            None => {
                all = (0..n).collect();
                &all
            }
        };
        for &s in segments {
            if s >= n {
                return Err(Error::InvalidArgument(format!("segment {s} out of range")));
            }
            for (k, px) in self.patch.patch_pixel_indices(s).enumerate() {
                img[px] = patches[(s, k)];
            }
        }
        Ok(img)
    }
}

/// Clamped patch pixels for the embedding `e` of a patch-based network.
pub fn invert_patch_embedding(net: &Network, e: &[f64]) -> Result<Matrix> {
    PatchDecoder::new(net)?.decode(e)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / z).collect()
}

pub fn argmax(y: &[f64]) -> usize {
    y.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Images reconstructed from a trajectory, with the network's class
/// distribution for each.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedBatch {
    pub images: Vec<Vec<f64>>,
    pub predictions: Vec<Vec<f64>>,
    /// Step index of each image in the source trajectory.
    pub indices: Vec<usize>,
    pub source: String,
}

impl DecodedBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes `img_<k>.pgm` for every image into `dir`.
    pub fn write_pgms(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        let mut paths = Vec::with_capacity(self.images.len());
        for (img, k) in self.images.iter().zip(&self.indices) {
            let path = dir.join(format!("img_{k:05}.pgm"));
            GrayImage::square(img.clone())?.write_pgm(&path)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Class distribution of `net` on the raw input `x`.
pub fn classify(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&net.output(x, 0)?))
}

/// Decodes every recorded point of `traj`: cap to `bounds` (if given),
/// invert the patch embedding, paste the selected patches into `original`,
/// and classify the result. Trajectories that start at layer 0 are already
/// images and are only clamped to `[0, 1]`.
pub fn decode_trajectory(
    net: &Network,
    traj: &Trajectory,
    original: &[f64],
    bounds: Option<&FeasibleBounds>,
) -> Result<DecodedBatch> {
    if traj.from_layer == 0 {
        return decode_pixel_trajectory(net, traj, bounds);
    }
    if traj.from_layer != net.embed_boundary() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lives in layer {} but the network embeds at {}",
            traj.from_layer,
            net.embed_boundary()
        )));
    }
    let decoder = PatchDecoder::new(net)?;
    let mut images = Vec::with_capacity(traj.points.len());
    let mut predictions = Vec::with_capacity(traj.points.len());
    for p in &traj.points {
        let capped = match bounds {
            Some(b) => crate::explore::project_feasible(p, b)?,
            None => p.clone(),
        };
        let patches = decoder.decode(&capped)?;
        let img = decoder.splice(&patches, original, traj.selection.as_deref())?;
        predictions.push(classify(net, &img)?);
        images.push(img);
    }
    Ok(DecodedBatch {
        images,
        predictions,
        indices: traj.indices.clone(),
        source: format!("{}-seed{}", traj.mode.name(), traj.seed),
    })
}

// points already are images (the pixel-space baseline)
fn decode_pixel_trajectory(net: &Network, traj: &Trajectory, bounds: Option<&FeasibleBounds>) -> Result<DecodedBatch> {
    let mut images = Vec::with_capacity(traj.points.len());
    let mut predictions = Vec::with_capacity(traj.points.len());
    for p in &traj.points {
        check_len("pixel trajectory point", net.input_dim(), p.len())?;
        let mut img = match bounds {
            Some(b) => crate::explore::project_feasible(p, b)?,
            None => p.clone(),
        };
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        predictions.push(classify(net, &img)?);
        images.push(img);
    }
    Ok(DecodedBatch {
        images,
        predictions,
        indices: traj.indices.clone(),
        source: format!("{}-seed{}", traj.mode.name(), traj.seed),
    })
}

/// Decoded images split by whether the predicted class moved away from
/// `i_star`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSplit {
    pub i_star: usize,
    /// Positions in the batch whose argmax differs from `i_star`.
    pub changed: Vec<usize>,
    pub stable: Vec<usize>,
    pub argmax: Vec<usize>,
    /// Probability of class `i_star` for each image.
    pub trend: Vec<f64>,
    pub indices: Vec<usize>,
}

pub fn split_predictions(batch: &DecodedBatch, i_star: usize) -> Result<PredictionSplit> {
    let classes = batch.predictions.first().map_or(0, Vec::len);
    if i_star >= classes {
        return Err(Error::InvalidArgument(format!("class {i_star} out of range 0..{classes}")));
    }
    let mut split = PredictionSplit {
        i_star,
        changed: Vec::new(),
        stable: Vec::new(),
        argmax: Vec::with_capacity(batch.len()),
        trend: Vec::with_capacity(batch.len()),
        indices: batch.indices.clone(),
    };
    for (k, y) in batch.predictions.iter().enumerate() {
        let a = argmax(y);
        if a == i_star {
            split.stable.push(k);
        } else {
            split.changed.push(k);
        }
        split.argmax.push(a);
        split.trend.push(y[i_star]);
    }
    Ok(split)
}

impl PredictionSplit {
    /// `iteration,argmax,y_istar,set` with `set` ∈ {C, S}.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,argmax,y_istar,set\n");
        for k in 0..self.argmax.len() {
            let tag = if self.argmax[k] == self.i_star { 'S' } else { 'C' };
            let _ = writeln!(out, "{},{},{},{tag}", self.indices[k], self.argmax[k], self.trend[k]);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }
}
