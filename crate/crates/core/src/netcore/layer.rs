//! Smooth layers and their exact first-order propagation rules.
//!
//! Every layer maps a flat real vector to a flat real vector. Token-shaped
//! data (an `n × h` matrix) is stored row-major, one token per row.
//!
//! A layer is evaluated once with [`LayerSpec::forward_traced`], which keeps
//! whatever intermediate values the derivative rules need. The trace then
//! drives [`LayerSpec::jvp`] (tangent in, tangent out) and
//! [`LayerSpec::vjp`] (cotangent in, cotangent out, plus parameter
//! gradients for training).

use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Affine,
    Sigmoid,
    GeLU,
    Tanh,
    LayerNorm,
    Softmax,
    SelfAttention,
    ResidualAdd,
    MLPBlock,
    PatchEmbed,
    PositionalAdd,
    ClsPrepend,
    ClsSelect,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Affine => "Affine",
            LayerKind::Sigmoid => "Sigmoid",
            LayerKind::GeLU => "GeLU",
            LayerKind::Tanh => "Tanh",
            LayerKind::LayerNorm => "LayerNorm",
            LayerKind::Softmax => "Softmax",
            LayerKind::SelfAttention => "SelfAttention",
            LayerKind::ResidualAdd => "ResidualAdd",
            LayerKind::MLPBlock => "MLPBlock",
            LayerKind::PatchEmbed => "PatchEmbed",
            LayerKind::PositionalAdd => "PositionalAdd",
            LayerKind::ClsPrepend => "ClsPrepend",
            LayerKind::ClsSelect => "ClsSelect",
        }
    }
}

/// `y = A·x + b`
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Per-token normalization over contiguous groups of `width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub width: usize,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub eps: f64,
}

/// Bidirectional multi-head softmax attention over all tokens.
///
/// Projection matrices are `width × width` (output × input); head `k` owns
/// columns `k·dh .. (k+1)·dh` of the projected queries, keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub width: usize,
    pub heads: usize,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
}

/// Token-wise `W2·GeLU(W1·x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlock {
    pub width: usize,
    pub hidden: usize,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Cuts a square grayscale image into non-overlapping `patch × patch`
/// squares (row-major patch grid, row-major pixels inside a patch) and
/// projects each one to `width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub image_side: usize,
    pub patch: usize,
    /// `width × patch²`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl PatchEmbed {
    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }

    /// Pixel offsets (into the flattened image) of patch `s`, in the order
    /// the projection consumes them.
    pub fn patch_pixel_indices(&self, s: usize) -> impl Iterator<Item = usize> + '_ {
        let g = self.grid_side();
        let (pr, pc) = (s / g, s % g);
        let p = self.patch;
        let side = self.image_side;
        (0..p * p).map(move |k| {
            let (r, c) = (k / p, k % p);
            (pr * p + r) * side + pc * p + c
        })
    }

    pub fn gather_patch(&self, image: &[f64], s: usize) -> Vec<f64> {
        self.patch_pixel_indices(s).map(|i| image[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Affine(Affine),
    Sigmoid,
    GeLU,
    Tanh,
    LayerNorm(LayerNorm),
    /// Softmax over contiguous groups of `group` entries; `None` means the
    /// whole vector is one group.
    Softmax { group: Option<usize> },
    SelfAttention(SelfAttention),
    /// `y = x + inner(x)` where `inner` is applied in order.
    ResidualAdd(Vec<LayerSpec>),
    MLPBlock(MlpBlock),
    PatchEmbed(PatchEmbed),
    /// Adds a `tokens × width` table.
    PositionalAdd(Matrix),
    /// Prepends a learned token row.
    ClsPrepend(Vec<f64>),
    /// Keeps only the first token row.
    ClsSelect { width: usize },
}

/// Intermediate values kept from a forward evaluation.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    extra: Extra,
}

#[derive(Clone, Debug)]
enum Extra {
    None,
    LayerNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
        /// `heads × tokens × tokens`
        probs: Vec<f64>,
        /// concatenated head outputs before the output projection
        mixed: Vec<f64>,
    },
    Mlp {
        pre: Vec<f64>,
        act: Vec<f64>,
    },
    Residual(Vec<Trace>),
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Affine(_) => LayerKind::Affine,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
            LayerSpec::GeLU => LayerKind::GeLU,
            LayerSpec::Tanh => LayerKind::Tanh,
            LayerSpec::LayerNorm(_) => LayerKind::LayerNorm,
            LayerSpec::Softmax { .. } => LayerKind::Softmax,
            LayerSpec::SelfAttention(_) => LayerKind::SelfAttention,
            LayerSpec::ResidualAdd(_) => LayerKind::ResidualAdd,
            LayerSpec::MLPBlock(_) => LayerKind::MLPBlock,
            LayerSpec::PatchEmbed(_) => LayerKind::PatchEmbed,
            LayerSpec::PositionalAdd(_) => LayerKind::PositionalAdd,
            LayerSpec::ClsPrepend(_) => LayerKind::ClsPrepend,
            LayerSpec::ClsSelect { .. } => LayerKind::ClsSelect,
        }
    }

    pub fn affine(weight: Matrix, bias: Vec<f64>) -> Self {
        LayerSpec::Affine(Affine { weight, bias })
    }

    pub fn layer_norm(width: usize) -> Self {
        LayerSpec::LayerNorm(LayerNorm {
            width,
            gain: vec![1.0; width],
            bias: vec![0.0; width],
            eps: LAYER_NORM_EPS,
        })
    }

    /// Output dimension for an input of dimension `d_in`, or a reason why
    /// the layer cannot accept it.
    pub fn output_dim(&self, d_in: usize) -> Result<usize, String> {
        let rows_of = |width: usize| -> Result<usize, String> {
            if width == 0 || d_in % width != 0 {
                Err(format!("input dim {d_in} is not a multiple of width {width}"))
            } else {
                Ok(d_in / width)
            }
        };
        match self {
            LayerSpec::Affine(a) => {
                if a.weight.cols() != d_in {
                    return Err(format!(
                        "weight has {} columns but input dim is {d_in}",
                        a.weight.cols()
                    ));
                }
                if a.bias.len() != a.weight.rows() {
                    return Err(format!(
                        "bias length {} != weight rows {}",
                        a.bias.len(),
                        a.weight.rows()
                    ));
                }
                Ok(a.weight.rows())
            }
            LayerSpec::Sigmoid | LayerSpec::GeLU | LayerSpec::Tanh => Ok(d_in),
            LayerSpec::LayerNorm(ln) => {
                rows_of(ln.width)?;
                if ln.gain.len() != ln.width || ln.bias.len() != ln.width {
                    return Err("gain/bias length differs from width".into());
                }
                if !(ln.eps > 0.0) {
                    return Err("epsilon must be positive".into());
                }
                Ok(d_in)
            }
            LayerSpec::Softmax { group } => {
                let g = group.unwrap_or(d_in);
                if g == 0 || d_in % g != 0 {
                    return Err(format!("group {g} does not divide input dim {d_in}"));
                }
                Ok(d_in)
            }
            LayerSpec::SelfAttention(at) => {
                rows_of(at.width)?;
                if at.heads == 0 || at.width % at.heads != 0 {
                    return Err(format!(
                        "width {} not divisible by {} heads",
                        at.width, at.heads
                    ));
                }
                for (name, m) in [("wq", &at.wq), ("wk", &at.wk), ("wv", &at.wv), ("wo", &at.wo)] {
                    if m.rows() != at.width || m.cols() != at.width {
                        return Err(format!("{name} must be {0}×{0}", at.width));
                    }
                }
                for b in [&at.bq, &at.bk, &at.bv, &at.bo] {
                    if b.len() != at.width {
                        return Err("projection bias length differs from width".into());
                    }
                }
                Ok(d_in)
            }
            LayerSpec::ResidualAdd(inner) => {
                let mut d = d_in;
                for layer in inner {
                    d = layer.output_dim(d)?;
                }
                if d != d_in {
                    return Err(format!("residual branch maps {d_in} to {d}"));
                }
                Ok(d_in)
            }
            LayerSpec::MLPBlock(m) => {
                rows_of(m.width)?;
                if m.w1.rows() != m.hidden
                    || m.w1.cols() != m.width
                    || m.w2.rows() != m.width
                    || m.w2.cols() != m.hidden
                    || m.b1.len() != m.hidden
                    || m.b2.len() != m.width
                {
                    return Err("MLP weight shapes inconsistent with width/hidden".into());
                }
                Ok(d_in)
            }
            LayerSpec::PatchEmbed(p) => {
                if p.patch == 0 || p.image_side % p.patch != 0 {
                    return Err(format!(
                        "image side {} not divisible by patch {}",
                        p.image_side, p.patch
                    ));
                }
                if d_in != p.image_side * p.image_side {
                    return Err(format!(
                        "expected {} pixels, got {d_in}",
                        p.image_side * p.image_side
                    ));
                }
                if p.weight.cols() != p.patch_pixels() || p.bias.len() != p.width() {
                    return Err("projection shape inconsistent with patch size".into());
                }
                Ok(p.num_patches() * p.width())
            }
            LayerSpec::PositionalAdd(table) => {
                if table.rows() * table.cols() != d_in {
                    return Err(format!(
                        "table is {}×{} but input dim is {d_in}",
                        table.rows(),
                        table.cols()
                    ));
                }
                Ok(d_in)
            }
            LayerSpec::ClsPrepend(token) => {
                rows_of(token.len())?;
                Ok(d_in + token.len())
            }
            LayerSpec::ClsSelect { width } => {
                let rows = rows_of(*width)?;
                if rows == 0 {
                    return Err("no token to select".into());
                }
                Ok(*width)
            }
        }
    }

    // ---------------------------------------------------------------------
    // forward
    // ---------------------------------------------------------------------

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_traced(x).output
    }

    pub fn forward_traced(&self, x: &[f64]) -> Trace {
        let (output, extra) = match self {
            LayerSpec::Affine(a) => {
                let mut y = a.weight.matvec(x);
                y.iter_mut().zip(&a.bias).for_each(|(yi, bi)| *yi += bi);
                (y, Extra::None)
            }
            LayerSpec::Sigmoid => (x.iter().map(|&v| sigmoid(v)).collect(), Extra::None),
            LayerSpec::Tanh => (x.iter().map(|&v| v.tanh()).collect(), Extra::None),
            LayerSpec::GeLU => (x.iter().map(|&v| gelu(v)).collect(), Extra::None),
            LayerSpec::LayerNorm(ln) => {
                let rows = x.len() / ln.width;
                let mut xhat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; rows];
                let mut y = vec![0.0; x.len()];
                for r in 0..rows {
                    let seg = &x[r * ln.width..(r + 1) * ln.width];
                    let mean = seg.iter().sum::<f64>() / ln.width as f64;
                    let var =
                        seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ln.width as f64;
                    let inv = 1.0 / (var + ln.eps).sqrt();
                    inv_std[r] = inv;
                    for c in 0..ln.width {
                        let i = r * ln.width + c;
                        xhat[i] = (x[i] - mean) * inv;
                        y[i] = ln.gain[c] * xhat[i] + ln.bias[c];
                    }
                }
                (y, Extra::LayerNorm { xhat, inv_std })
            }
            LayerSpec::Softmax { group } => {
                let g = group.unwrap_or(x.len());
                let mut y = vec![0.0; x.len()];
                for (src, dst) in x.chunks(g).zip(y.chunks_mut(g)) {
                    softmax_into(src, dst);
                }
                (y, Extra::None)
            }
            LayerSpec::SelfAttention(at) => attention_forward(at, x),
            LayerSpec::ResidualAdd(inner) => {
                let mut traces = Vec::with_capacity(inner.len());
                let mut h = x.to_vec();
                for layer in inner {
                    let t = layer.forward_traced(&h);
                    h = t.output.clone();
                    traces.push(t);
                }
                let y = x.iter().zip(&h).map(|(a, b)| a + b).collect();
                (y, Extra::Residual(traces))
            }
            LayerSpec::MLPBlock(m) => {
                let pre = rows_linear(x, m.width, &m.w1, Some(&m.b1));
                let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
                let y = rows_linear(&act, m.hidden, &m.w2, Some(&m.b2));
                (y, Extra::Mlp { pre, act })
            }
            LayerSpec::PatchEmbed(p) => {
                let w = p.width();
                let mut y = vec![0.0; p.num_patches() * w];
                for s in 0..p.num_patches() {
                    let patch = p.gather_patch(x, s);
                    let out = &mut y[s * w..(s + 1) * w];
                    for (o, (row, b)) in out.iter_mut().zip((0..w).map(|i| p.weight.row(i)).zip(&p.bias)) {
                        *o = dot(row, &patch) + b;
                    }
                }
                (y, Extra::None)
            }
            LayerSpec::PositionalAdd(table) => (
                x.iter().zip(table.as_slice()).map(|(a, b)| a + b).collect(),
                Extra::None,
            ),
            LayerSpec::ClsPrepend(token) => {
                let mut y = Vec::with_capacity(x.len() + token.len());
                y.extend_from_slice(token);
                y.extend_from_slice(x);
                (y, Extra::None)
            }
            LayerSpec::ClsSelect { width } => (x[..*width].to_vec(), Extra::None),
        };
        Trace {
            input: x.to_vec(),
            output,
            extra,
        }
    }

    // ---------------------------------------------------------------------
    // tangent propagation
    // ---------------------------------------------------------------------

    /// Directional derivative `J·v` at the traced point.
    pub fn jvp(&self, trace: &Trace, v: &[f64]) -> Vec<f64> {
        let x = &trace.input;
        let y = &trace.output;
        match (self, &trace.extra) {
            (LayerSpec::Affine(a), _) => a.weight.matvec(v),
            (LayerSpec::Sigmoid, _) => y
                .iter()
                .zip(v)
                .map(|(s, dv)| s * (1.0 - s) * dv)
                .collect(),
            (LayerSpec::Tanh, _) => y.iter().zip(v).map(|(t, dv)| (1.0 - t * t) * dv).collect(),
            (LayerSpec::GeLU, _) => x.iter().zip(v).map(|(&xi, dv)| gelu_prime(xi) * dv).collect(),
            (LayerSpec::LayerNorm(ln), Extra::LayerNorm { xhat, inv_std }) => {
                let mut out = vec![0.0; v.len()];
                layer_norm_linear(ln, xhat, inv_std, v, &mut out);
                for r in 0..inv_std.len() {
                    for c in 0..ln.width {
                        out[r * ln.width + c] *= ln.gain[c];
                    }
                }
                out
            }
            (LayerSpec::Softmax { group }, _) => {
                let g = group.unwrap_or(v.len());
                let mut out = vec![0.0; v.len()];
                for ((p, dv), o) in y.chunks(g).zip(v.chunks(g)).zip(out.chunks_mut(g)) {
                    softmax_linear(p, dv, o);
                }
                out
            }
            (LayerSpec::SelfAttention(at), Extra::Attention { q, k, v: vals, probs, .. }) => {
                attention_jvp(at, q, k, vals, probs, v)
            }
            (LayerSpec::ResidualAdd(inner), Extra::Residual(traces)) => {
                let mut t = v.to_vec();
                for (layer, tr) in inner.iter().zip(traces) {
                    t = layer.jvp(tr, &t);
                }
                v.iter().zip(&t).map(|(a, b)| a + b).collect()
            }
            (LayerSpec::MLPBlock(m), Extra::Mlp { pre, .. }) => {
                let mut dpre = rows_linear(v, m.width, &m.w1, None);
                dpre.iter_mut().zip(pre).for_each(|(d, &p)| *d *= gelu_prime(p));
                rows_linear(&dpre, m.hidden, &m.w2, None)
            }
            (LayerSpec::PatchEmbed(p), _) => {
                let w = p.width();
                let mut out = vec![0.0; p.num_patches() * w];
                for s in 0..p.num_patches() {
                    let patch = p.gather_patch(v, s);
                    for i in 0..w {
                        out[s * w + i] = dot(p.weight.row(i), &patch);
                    }
                }
                out
            }
            (LayerSpec::PositionalAdd(_), _) => v.to_vec(),
            (LayerSpec::ClsPrepend(token), _) => {
                let mut out = vec![0.0; token.len()];
                out.extend_from_slice(v);
                out
            }
            (LayerSpec::ClsSelect { width }, _) => v[..*width].to_vec(),
            _ => unreachable!("trace does not belong to this layer"),
        }
    }

    // ---------------------------------------------------------------------
    // adjoint propagation
    // ---------------------------------------------------------------------

    /// Pulls the cotangent `gy` back through the layer, returning `Jᵀ·gy`.
    /// When `grads` is given, parameter gradients are accumulated into it
    /// (one buffer per tensor, in [`LayerSpec::params`] order).
    pub fn vjp(&self, trace: &Trace, gy: &[f64], grads: Option<&mut [Vec<f64>]>) -> Vec<f64> {
        let x = &trace.input;
        let y = &trace.output;
        match (self, &trace.extra) {
            (LayerSpec::Affine(a), _) => {
                if let Some(g) = grads {
                    let cols = a.weight.cols();
                    for (i, &gi) in gy.iter().enumerate() {
                        axpy(gi, x, &mut g[0][i * cols..(i + 1) * cols]);
                        g[1][i] += gi;
                    }
                }
                a.weight.tr_matvec(gy)
            }
            (LayerSpec::Sigmoid, _) => y
                .iter()
                .zip(gy)
                .map(|(s, g)| s * (1.0 - s) * g)
                .collect(),
            (LayerSpec::Tanh, _) => y.iter().zip(gy).map(|(t, g)| (1.0 - t * t) * g).collect(),
            (LayerSpec::GeLU, _) => x.iter().zip(gy).map(|(&xi, g)| gelu_prime(xi) * g).collect(),
            (LayerSpec::LayerNorm(ln), Extra::LayerNorm { xhat, inv_std }) => {
                let mut gxhat = gy.to_vec();
                for r in 0..inv_std.len() {
                    for c in 0..ln.width {
                        gxhat[r * ln.width + c] *= ln.gain[c];
                    }
                }
                if let Some(g) = grads {
                    for (i, (&gi, &xh)) in gy.iter().zip(xhat).enumerate() {
                        let c = i % ln.width;
                        g[0][c] += gi * xh;
                        g[1][c] += gi;
                    }
                }
                // the normalization Jacobian is symmetric
                let mut out = vec![0.0; gy.len()];
                layer_norm_linear(ln, xhat, inv_std, &gxhat, &mut out);
                out
            }
            (LayerSpec::Softmax { group }, _) => {
                let g = group.unwrap_or(gy.len());
                let mut out = vec![0.0; gy.len()];
                for ((p, dv), o) in y.chunks(g).zip(gy.chunks(g)).zip(out.chunks_mut(g)) {
                    softmax_linear(p, dv, o);
                }
                out
            }
            (
                LayerSpec::SelfAttention(at),
                Extra::Attention {
                    q,
                    k,
                    v,
                    probs,
                    mixed,
                },
            ) => attention_vjp(at, x, q, k, v, probs, mixed, gy, grads),
            (LayerSpec::ResidualAdd(inner), Extra::Residual(traces)) => {
                let mut g = gy.to_vec();
                match grads {
                    Some(grads) => {
                        let mut offsets = Vec::with_capacity(inner.len());
                        let mut off = 0;
                        for layer in inner {
                            offsets.push(off);
                            off += layer.param_tensor_count();
                        }
                        for ((layer, tr), &o) in inner.iter().zip(traces).zip(&offsets).rev() {
                            let n = layer.param_tensor_count();
                            g = layer.vjp(tr, &g, Some(&mut grads[o..o + n]));
                        }
                    }
                    None => {
                        for (layer, tr) in inner.iter().zip(traces).rev() {
                            g = layer.vjp(tr, &g, None);
                        }
                    }
                }
                gy.iter().zip(&g).map(|(a, b)| a + b).collect()
            }
            (LayerSpec::MLPBlock(m), Extra::Mlp { pre, act }) => {
                let rows = x.len() / m.width;
                let mut gact = rows_linear_transpose(gy, m.width, &m.w2);
                let mut grads = grads;
                if let Some(g) = grads.as_deref_mut() {
                    accumulate_outer(gy, act, rows, m.width, m.hidden, &mut g[2]);
                    accumulate_bias(gy, m.width, &mut g[3]);
                }
                gact.iter_mut().zip(pre).for_each(|(ga, &p)| *ga *= gelu_prime(p));
                if let Some(g) = grads.as_deref_mut() {
                    accumulate_outer(&gact, x, rows, m.hidden, m.width, &mut g[0]);
                    accumulate_bias(&gact, m.hidden, &mut g[1]);
                }
                rows_linear_transpose(&gact, m.hidden, &m.w1)
            }
            (LayerSpec::PatchEmbed(p), _) => {
                let w = p.width();
                let mut gx = vec![0.0; x.len()];
                let mut grads = grads;
                for s in 0..p.num_patches() {
                    let gs = &gy[s * w..(s + 1) * w];
                    let back = p.weight.tr_matvec(gs);
                    for (idx, b) in p.patch_pixel_indices(s).zip(&back) {
                        gx[idx] += b;
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        let patch = p.gather_patch(x, s);
                        let pp = p.patch_pixels();
                        for (i, &gi) in gs.iter().enumerate() {
                            axpy(gi, &patch, &mut g[0][i * pp..(i + 1) * pp]);
                            g[1][i] += gi;
                        }
                    }
                }
                gx
            }
            (LayerSpec::PositionalAdd(_), _) => {
                if let Some(g) = grads {
                    axpy(1.0, gy, &mut g[0]);
                }
                gy.to_vec()
            }
            (LayerSpec::ClsPrepend(token), _) => {
                let w = token.len();
                if let Some(g) = grads {
                    axpy(1.0, &gy[..w], &mut g[0]);
                }
                gy[w..].to_vec()
            }
            (LayerSpec::ClsSelect { width }, _) => {
                let mut gx = vec![0.0; x.len()];
                gx[..*width].copy_from_slice(gy);
                gx
            }
            _ => unreachable!("trace does not belong to this layer"),
        }
    }

    // ---------------------------------------------------------------------
    // parameters
    // ---------------------------------------------------------------------

    /// Parameter tensors in declaration order.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            LayerSpec::Affine(a) => vec![a.weight.as_slice(), &a.bias],
            LayerSpec::LayerNorm(ln) => vec![&ln.gain, &ln.bias],
            LayerSpec::SelfAttention(at) => vec![
                at.wq.as_slice(),
                &at.bq,
                at.wk.as_slice(),
                &at.bk,
                at.wv.as_slice(),
                &at.bv,
                at.wo.as_slice(),
                &at.bo,
            ],
            LayerSpec::ResidualAdd(inner) => inner.iter().flat_map(|l| l.params()).collect(),
            LayerSpec::MLPBlock(m) => vec![m.w1.as_slice(), &m.b1, m.w2.as_slice(), &m.b2],
            LayerSpec::PatchEmbed(p) => vec![p.weight.as_slice(), &p.bias],
            LayerSpec::PositionalAdd(t) => vec![t.as_slice()],
            LayerSpec::ClsPrepend(t) => vec![t],
            LayerSpec::Sigmoid
            | LayerSpec::GeLU
            | LayerSpec::Tanh
            | LayerSpec::Softmax { .. }
            | LayerSpec::ClsSelect { .. } => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerSpec::Affine(a) => vec![a.weight.as_mut_slice(), &mut a.bias],
            LayerSpec::LayerNorm(ln) => vec![&mut ln.gain, &mut ln.bias],
            LayerSpec::SelfAttention(at) => vec![
                at.wq.as_mut_slice(),
                &mut at.bq,
                at.wk.as_mut_slice(),
                &mut at.bk,
                at.wv.as_mut_slice(),
                &mut at.bv,
                at.wo.as_mut_slice(),
                &mut at.bo,
            ],
            LayerSpec::ResidualAdd(inner) => {
                inner.iter_mut().flat_map(|l| l.params_mut()).collect()
            }
            LayerSpec::MLPBlock(m) => vec![
                m.w1.as_mut_slice(),
                &mut m.b1,
                m.w2.as_mut_slice(),
                &mut m.b2,
            ],
            LayerSpec::PatchEmbed(p) => vec![p.weight.as_mut_slice(), &mut p.bias],
            LayerSpec::PositionalAdd(t) => vec![t.as_mut_slice()],
            LayerSpec::ClsPrepend(t) => vec![t.as_mut_slice()],
            LayerSpec::Sigmoid
            | LayerSpec::GeLU
            | LayerSpec::Tanh
            | LayerSpec::Softmax { .. }
            | LayerSpec::ClsSelect { .. } => Vec::new(),
        }
    }

    pub fn param_tensor_count(&self) -> usize {
        match self {
            LayerSpec::ResidualAdd(inner) => inner.iter().map(|l| l.param_tensor_count()).sum(),
            other => other.params().len(),
        }
    }
}

// -------------------------------------------------------------------------
// scalar nonlinearities
// -------------------------------------------------------------------------

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `x·Φ(x)` with the Gaussian CDF.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// `out = diag(p)·v − p·(pᵀv)`, the (symmetric) softmax Jacobian applied to `v`.
fn softmax_linear(p: &[f64], v: &[f64], out: &mut [f64]) {
    let s = dot(p, v);
    for ((o, &pi), &vi) in out.iter_mut().zip(p).zip(v) {
        *o = pi * (vi - s);
    }
}

/// Derivative of `x ↦ x̂` (before gain) applied to `v`, row by row.
fn layer_norm_linear(ln: &LayerNorm, xhat: &[f64], inv_std: &[f64], v: &[f64], out: &mut [f64]) {
    let w = ln.width;
    let n = w as f64;
    for (r, &inv) in inv_std.iter().enumerate() {
        let xs = &xhat[r * w..(r + 1) * w];
        let vs = &v[r * w..(r + 1) * w];
        let mean_v = vs.iter().sum::<f64>() / n;
        let mean_vx = dot(vs, xs) / n;
        for c in 0..w {
            out[r * w + c] = inv * (vs[c] - mean_v - xs[c] * mean_vx);
        }
    }
}

// -------------------------------------------------------------------------
// token-wise linear algebra helpers
// -------------------------------------------------------------------------

/// Applies `w` (out × in) to each row of `x` (rows × in).
fn rows_linear(x: &[f64], in_width: usize, w: &Matrix, bias: Option<&[f64]>) -> Vec<f64> {
    let rows = x.len() / in_width;
    let out_w = w.rows();
    let mut y = vec![0.0; rows * out_w];
    for r in 0..rows {
        let xr = &x[r * in_width..(r + 1) * in_width];
        for o in 0..out_w {
            let mut acc = dot(w.row(o), xr);
            if let Some(b) = bias {
                acc += b[o];
            }
            y[r * out_w + o] = acc;
        }
    }
    y
}

/// Applies `wᵀ` to each row of `g` (rows × out).
fn rows_linear_transpose(g: &[f64], out_width: usize, w: &Matrix) -> Vec<f64> {
    let rows = g.len() / out_width;
    let in_w = w.cols();
    let mut x = vec![0.0; rows * in_w];
    for r in 0..rows {
        let dst = &mut x[r * in_w..(r + 1) * in_w];
        for o in 0..out_width {
            let gv = g[r * out_width + o];
            if gv != 0.0 {
                axpy(gv, w.row(o), dst);
            }
        }
    }
    x
}

/// `acc (out × in) += Σ_r g_r ⊗ x_r`
fn accumulate_outer(g: &[f64], x: &[f64], rows: usize, out_w: usize, in_w: usize, acc: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * in_w..(r + 1) * in_w];
        for o in 0..out_w {
            let gv = g[r * out_w + o];
            if gv != 0.0 {
                axpy(gv, xr, &mut acc[o * in_w..(o + 1) * in_w]);
            }
        }
    }
}

fn accumulate_bias(g: &[f64], width: usize, acc: &mut [f64]) {
    for row in g.chunks(width) {
        axpy(1.0, row, acc);
    }
}

// -------------------------------------------------------------------------
// attention
// -------------------------------------------------------------------------

fn attention_forward(at: &SelfAttention, x: &[f64]) -> (Vec<f64>, Extra) {
    let w = at.width;
    let t = x.len() / w;
    let dh = w / at.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = rows_linear(x, w, &at.wq, Some(&at.bq));
    let k = rows_linear(x, w, &at.wk, Some(&at.bk));
    let v = rows_linear(x, w, &at.wv, Some(&at.bv));
    let mut probs = vec![0.0; at.heads * t * t];
    let mut mixed = vec![0.0; t * w];
    let mut scores = vec![0.0; t];
    for h in 0..at.heads {
        let c0 = h * dh;
        for i in 0..t {
            let qi = &q[i * w + c0..i * w + c0 + dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = scale * dot(qi, &k[j * w + c0..j * w + c0 + dh]);
            }
            let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            softmax_into(&scores, p);
            let dst = &mut mixed[i * w + c0..i * w + c0 + dh];
            for (j, &pj) in p.iter().enumerate() {
                axpy(pj, &v[j * w + c0..j * w + c0 + dh], dst);
            }
        }
    }
    let y = rows_linear(&mixed, w, &at.wo, Some(&at.bo));
    (
        y,
        Extra::Attention {
            q,
            k,
            v,
            probs,
            mixed,
        },
    )
}

fn attention_jvp(
    at: &SelfAttention,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dx: &[f64],
) -> Vec<f64> {
    let w = at.width;
    let t = dx.len() / w;
    let dh = w / at.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dq = rows_linear(dx, w, &at.wq, None);
    let dk = rows_linear(dx, w, &at.wk, None);
    let dv = rows_linear(dx, w, &at.wv, None);
    let mut dmixed = vec![0.0; t * w];
    let mut ds = vec![0.0; t];
    let mut dp = vec![0.0; t];
    for h in 0..at.heads {
        let c0 = h * dh;
        for i in 0..t {
            let qi = &q[i * w + c0..i * w + c0 + dh];
            let dqi = &dq[i * w + c0..i * w + c0 + dh];
            for (j, s) in ds.iter_mut().enumerate() {
                let kj = &k[j * w + c0..j * w + c0 + dh];
                let dkj = &dk[j * w + c0..j * w + c0 + dh];
                *s = scale * (dot(dqi, kj) + dot(qi, dkj));
            }
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            softmax_linear(p, &ds, &mut dp);
            let dst = &mut dmixed[i * w + c0..i * w + c0 + dh];
            for j in 0..t {
                axpy(dp[j], &v[j * w + c0..j * w + c0 + dh], dst);
                axpy(p[j], &dv[j * w + c0..j * w + c0 + dh], dst);
            }
        }
    }
    rows_linear(&dmixed, w, &at.wo, None)
}

#[allow(clippy::too_many_arguments)]
fn attention_vjp(
    at: &SelfAttention,
    x: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    mixed: &[f64],
    gy: &[f64],
    grads: Option<&mut [Vec<f64>]>,
) -> Vec<f64> {
    let w = at.width;
    let t = gy.len() / w;
    let dh = w / at.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let gmixed = rows_linear_transpose(gy, w, &at.wo);
    let mut gq = vec![0.0; t * w];
    let mut gk = vec![0.0; t * w];
    let mut gv = vec![0.0; t * w];
    let mut gp = vec![0.0; t];
    let mut gs = vec![0.0; t];
    for h in 0..at.heads {
        let c0 = h * dh;
        for i in 0..t {
            let gmi = &gmixed[i * w + c0..i * w + c0 + dh];
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            for j in 0..t {
                gp[j] = dot(gmi, &v[j * w + c0..j * w + c0 + dh]);
                axpy(p[j], gmi, &mut gv[j * w + c0..j * w + c0 + dh]);
            }
            softmax_linear(p, &gp, &mut gs);
            let qi = &q[i * w + c0..i * w + c0 + dh];
            for j in 0..t {
                let g = gs[j] * scale;
                if g == 0.0 {
                    continue;
                }
                axpy(g, &k[j * w + c0..j * w + c0 + dh], &mut gq[i * w + c0..i * w + c0 + dh]);
                axpy(g, qi, &mut gk[j * w + c0..j * w + c0 + dh]);
            }
        }
    }
    if let Some(g) = grads {
        accumulate_outer(&gq, x, t, w, w, &mut g[0]);
        accumulate_bias(&gq, w, &mut g[1]);
        accumulate_outer(&gk, x, t, w, w, &mut g[2]);
        accumulate_bias(&gk, w, &mut g[3]);
        accumulate_outer(&gv, x, t, w, w, &mut g[4]);
        accumulate_bias(&gv, w, &mut g[5]);
        accumulate_outer(gy, mixed, t, w, w, &mut g[6]);
        accumulate_bias(gy, w, &mut g[7]);
    }
    let mut gx = rows_linear_transpose(&gq, w, &at.wq);
    axpy(1.0, &rows_linear_transpose(&gk, w, &at.wk), &mut gx);
    axpy(1.0, &rows_linear_transpose(&gv, w, &at.wv), &mut gx);
    gx
}
