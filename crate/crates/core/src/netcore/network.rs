use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg::{singular_values, Matrix};

use super::layer::{LayerSpec, PatchEmbed, Trace};

/// Relative singular-value threshold for the full-rank check on affine
/// weights.
pub const FULL_RANK_RTOL: f64 = 1e-10;

/// How the embedding space splits into segments (tokens or patches), each
/// occupying `width` contiguous coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub segments: usize,
    pub width: usize,
}

impl SegmentLayout {
    pub fn dim(&self) -> usize {
        self.segments * self.width
    }

    pub fn coords(&self, segment: usize) -> std::ops::Range<usize> {
        segment * self.width..(segment + 1) * self.width
    }
}

/// A network `M_0 → M_1 → … → M_n` as an ordered list of smooth layers.
///
/// `dims[i]` is the flattened dimension of `M_i`. Layers before
/// `embed_boundary` form the embedding map; exploration and attribution
/// operate on `M_embed_boundary`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    dims: Vec<usize>,
    embed_boundary: usize,
    layout: Option<SegmentLayout>,
}

/// Points on every manifold from the starting layer through the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub from_layer: usize,
    pub points: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.points.last().expect("activations always hold the query point")
    }
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        dims.push(input_dim);
        for (index, layer) in layers.iter().enumerate() {
            let d = layer
                .output_dim(dims[index])
                .map_err(|reason| Error::InvalidLayer {
                    index,
                    kind: layer.kind().name(),
                    reason,
                })?;
            dims.push(d);
        }
        let net = Network {
            layers,
            dims,
            embed_boundary: 0,
            layout: None,
        };
        net.validate_params()?;
        Ok(net)
    }

    pub fn with_embed_boundary(mut self, boundary: usize) -> Result<Self> {
        if boundary > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "embed boundary {boundary} exceeds layer count {}",
                self.layers.len()
            )));
        }
        self.embed_boundary = boundary;
        if let Some(l) = self.layout {
            if l.dim() != self.dims[boundary] {
                self.layout = None;
            }
        }
        Ok(self)
    }

    pub fn with_layout(mut self, segments: usize, width: usize) -> Result<Self> {
        let layout = SegmentLayout { segments, width };
        check_len("segment layout", self.embed_dim(), layout.dim())?;
        self.layout = Some(layout);
        Ok(self)
    }

    /// Finite parameters and numerically full-rank affine weights.
    pub fn validate_params(&self) -> Result<()> {
        for (index, layer) in self.layers.iter().enumerate() {
            if !layer.params().iter().all(|p| p.iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidLayer {
                    index,
                    kind: layer.kind().name(),
                    reason: "non-finite parameter".into(),
                });
            }
            if let LayerSpec::Affine(a) = layer {
                let s = singular_values(&a.weight);
                let largest = s.first().copied().unwrap_or(0.0);
                let smallest = s.last().copied().unwrap_or(0.0);
                if !(largest > 0.0) || smallest <= FULL_RANK_RTOL * largest {
                    return Err(Error::RankDeficient {
                        index,
                        smallest,
                        largest,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn embed_boundary(&self) -> usize {
        self.embed_boundary
    }

    pub fn embed_dim(&self) -> usize {
        self.dims[self.embed_boundary]
    }

    /// Segment layout of the embedding space. Without an explicit layout,
    /// every coordinate is its own segment.
    pub fn layout(&self) -> SegmentLayout {
        self.layout.unwrap_or(SegmentLayout {
            segments: self.embed_dim(),
            width: 1,
        })
    }

    pub fn has_explicit_layout(&self) -> bool {
        self.layout.is_some()
    }

    /// The patch embedding inside the embedding map, if any.
    pub fn patch_embed(&self) -> Option<&PatchEmbed> {
        self.layers[..self.embed_boundary].iter().find_map(|l| match l {
            LayerSpec::PatchEmbed(p) => Some(p),
            _ => None,
        })
    }

    /// Positional table added inside the embedding map, if any.
    pub fn positional_table(&self) -> Option<&Matrix> {
        self.layers[..self.embed_boundary].iter().find_map(|l| match l {
            LayerSpec::PositionalAdd(t) => Some(t),
            _ => None,
        })
    }

    fn check_point(&self, x: &[f64], from: usize, context: &'static str) -> Result<()> {
        if from > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer index {from} out of range 0..={}",
                self.layers.len()
            )));
        }
        check_len(context, self.dims[from], x.len())?;
        check_finite(context, x)
    }

    fn check_range(&self, from: usize, to: usize) -> Result<()> {
        if from > to || to > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "invalid layer range {from}..{to} (network has {} layers)",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Evaluates `𝒩_(from)` at `x`, returning every intermediate point.
    pub fn forward(&self, x: &[f64], from: usize) -> Result<Activations> {
        self.check_point(x, from, "forward input")?;
        let mut points = Vec::with_capacity(self.layers.len() - from + 1);
        points.push(x.to_vec());
        for layer in &self.layers[from..] {
            let next = layer.forward(points.last().unwrap());
            points.push(next);
        }
        check_finite("forward output", points.last().unwrap())?;
        Ok(Activations {
            from_layer: from,
            points,
        })
    }

    /// Evaluates layers `from..to` and returns only the final point.
    pub fn forward_range(&self, x: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
        self.check_range(from, to)?;
        self.check_point(x, from, "forward input")?;
        let mut h = x.to_vec();
        for layer in &self.layers[from..to] {
            h = layer.forward(&h);
        }
        check_finite("forward output", &h)?;
        Ok(h)
    }

    /// `𝒩_(from)(x)`
    pub fn output(&self, x: &[f64], from: usize) -> Result<Vec<f64>> {
        self.forward_range(x, from, self.layers.len())
    }

    /// Applies the embedding map (layers before the embed boundary).
    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.forward_range(raw, 0, self.embed_boundary)
    }

    pub(crate) fn trace_range(&self, x: &[f64], from: usize, to: usize) -> Vec<Trace> {
        let mut traces: Vec<Trace> = Vec::with_capacity(to - from);
        for layer in &self.layers[from..to] {
            let t = match traces.last() {
                Some(prev) => layer.forward_traced(&prev.output),
                None => layer.forward_traced(x),
            };
            traces.push(t);
        }
        traces
    }

    fn push_tangent(&self, traces: &[Trace], from: usize, v: &[f64]) -> Vec<f64> {
        let mut t = v.to_vec();
        for (layer, tr) in self.layers[from..].iter().zip(traces) {
            t = layer.jvp(tr, &t);
        }
        t
    }

    /// Exact directional derivative `J·v` of `𝒩_(from)` at `x`.
    pub fn jvp(&self, x: &[f64], v: &[f64], from: usize) -> Result<Vec<f64>> {
        self.check_point(x, from, "jvp point")?;
        check_len("jvp tangent", x.len(), v.len())?;
        let traces = self.trace_range(x, from, self.layers.len());
        Ok(self.push_tangent(&traces, from, v))
    }

    /// Jacobian of `𝒩_(from)` at `x` (`dims[n] × dims[from]`), one JVP per
    /// column.
    pub fn jacobian(&self, x: &[f64], from: usize) -> Result<Matrix> {
        self.jacobian_range(x, from, self.layers.len())
    }

    /// Jacobian of layers `from..to` at `x`.
    pub fn jacobian_range(&self, x: &[f64], from: usize, to: usize) -> Result<Matrix> {
        self.check_range(from, to)?;
        self.check_point(x, from, "jacobian point")?;
        let columns: Vec<usize> = (0..self.dims[from]).collect();
        self.columns_range(x, from, to, &columns)
    }

    /// The Jacobian of `𝒩_(from)` restricted to the input coordinates
    /// `columns` (`dims[n] × columns.len()`). Column `k` is bitwise equal to
    /// column `columns[k]` of [`Network::jacobian`].
    pub fn jacobian_columns(&self, x: &[f64], from: usize, columns: &[usize]) -> Result<Matrix> {
        self.check_point(x, from, "jacobian point")?;
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.dims[from]) {
            return Err(Error::InvalidArgument(format!(
                "coordinate {bad} out of range for dimension {}",
                self.dims[from]
            )));
        }
        self.columns_range(x, from, self.layers.len(), columns)
    }

    fn columns_range(&self, x: &[f64], from: usize, to: usize, columns: &[usize]) -> Result<Matrix> {
        let traces = self.trace_range(x, from, to);
        let d_in = self.dims[from];
        let mut jac = Matrix::zeros(self.dims[to], columns.len());
        let mut basis = vec![0.0; d_in];
        for (k, &j) in columns.iter().enumerate() {
            basis[j] = 1.0;
            let mut t = basis.clone();
            for (layer, tr) in self.layers[from..to].iter().zip(&traces) {
                t = layer.jvp(tr, &t);
            }
            jac.set_column(k, &t);
            basis[j] = 0.0;
        }
        if !jac.all_finite() {
            return Err(Error::NonFinite("jacobian"));
        }
        Ok(jac)
    }

    /// Central-difference Jacobian estimate. Test oracle only.
    pub fn finite_diff_jacobian(&self, x: &[f64], eps: f64, from: usize) -> Result<Matrix> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
        }
        self.check_point(x, from, "finite-difference point")?;
        let d_in = self.dims[from];
        let mut jac = Matrix::zeros(self.output_dim(), d_in);
        let mut xp = x.to_vec();
        for j in 0..d_in {
            xp[j] = x[j] + eps;
            let plus = self.output(&xp, from)?;
            xp[j] = x[j] - eps;
            let minus = self.output(&xp, from)?;
            xp[j] = x[j];
            let col: Vec<f64> = plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .collect();
            jac.set_column(j, &col);
        }
        Ok(jac)
    }

    /// Adjoint pass used by training: returns the input cotangent and
    /// accumulates parameter gradients into `grads` (one buffer per tensor,
    /// in [`Network::params`] order).
    pub(crate) fn backprop(
        &self,
        traces: &[Trace],
        output_grad: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_tensor_count();
        }
        let mut g = output_grad.to_vec();
        for ((layer, tr), &o) in self.layers.iter().zip(traces).zip(&offsets).rev() {
            let n = layer.param_tensor_count();
            g = layer.vjp(tr, &g, Some(&mut grads[o..o + n]));
        }
        g
    }

    /// All parameter tensors, layer by layer in declaration order.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub(crate) fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}
