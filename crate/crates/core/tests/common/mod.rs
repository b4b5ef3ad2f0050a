//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use fiberwalk_core::linalg::{norm, Matrix};
use fiberwalk_core::netcore::{
    LayerKind, LayerSpec, MlpBlock, Network, PatchEmbed, SelfAttention,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box–Muller keeps the fixtures independent of rand_distr
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub fn gaussian_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian_vec(rng, rows * cols, scale)).unwrap()
}

pub const ALL_KINDS: [LayerKind; 13] = [
    LayerKind::Affine,
    LayerKind::Sigmoid,
    LayerKind::GeLU,
    LayerKind::Tanh,
    LayerKind::LayerNorm,
    LayerKind::Softmax,
    LayerKind::SelfAttention,
    LayerKind::ResidualAdd,
    LayerKind::MLPBlock,
    LayerKind::PatchEmbed,
    LayerKind::PositionalAdd,
    LayerKind::ClsPrepend,
    LayerKind::ClsSelect,
];

pub fn attention(rng: &mut impl Rng, width: usize, heads: usize) -> LayerSpec {
    let s = 1.0 / (width as f64).sqrt();
    LayerSpec::SelfAttention(SelfAttention {
        width,
        heads,
        wq: gaussian_mat(rng, width, width, s),
        bq: gaussian_vec(rng, width, 0.1),
        wk: gaussian_mat(rng, width, width, s),
        bk: gaussian_vec(rng, width, 0.1),
        wv: gaussian_mat(rng, width, width, s),
        bv: gaussian_vec(rng, width, 0.1),
        wo: gaussian_mat(rng, width, width, s),
        bo: gaussian_vec(rng, width, 0.1),
    })
}

pub fn mlp(rng: &mut impl Rng, width: usize, hidden: usize) -> LayerSpec {
    LayerSpec::MLPBlock(MlpBlock {
        width,
        hidden,
        w1: gaussian_mat(rng, hidden, width, 1.0 / (width as f64).sqrt()),
        b1: gaussian_vec(rng, hidden, 0.1),
        w2: gaussian_mat(rng, width, hidden, 1.0 / (hidden as f64).sqrt()),
        b2: gaussian_vec(rng, width, 0.1),
    })
}

pub fn layer_norm(rng: &mut impl Rng, width: usize) -> LayerSpec {
    let mut ln = LayerSpec::layer_norm(width);
    if let LayerSpec::LayerNorm(l) = &mut ln {
        l.gain = gaussian_vec(rng, width, 1.0);
        l.bias = gaussian_vec(rng, width, 0.5);
    }
    ln
}

/// A one-layer network exercising `kind`, together with the input scale
/// that keeps it in a well-conditioned regime.
pub fn single_layer_net(kind: LayerKind, rng: &mut impl Rng) -> (Network, f64) {
    let tokens = 3;
    let width = 4;
    let td = tokens * width;
    let (d_in, layer, scale) = match kind {
        LayerKind::Affine => (5, LayerSpec::affine(gaussian_mat(rng, 3, 5, 1.0), gaussian_vec(rng, 3, 1.0)), 1.0),
        LayerKind::Sigmoid => (6, LayerSpec::Sigmoid, 2.0),
        LayerKind::GeLU => (6, LayerSpec::GeLU, 2.0),
        LayerKind::Tanh => (6, LayerSpec::Tanh, 1.5),
        LayerKind::LayerNorm => (td, layer_norm(rng, width), 1.0),
        LayerKind::Softmax => (6, LayerSpec::Softmax { group: Some(3) }, 1.5),
        LayerKind::SelfAttention => (td, attention(rng, width, 2), 1.0),
        LayerKind::ResidualAdd => (
            td,
            LayerSpec::ResidualAdd(vec![layer_norm(rng, width), attention(rng, width, 2)]),
            1.0,
        ),
        LayerKind::MLPBlock => (td, mlp(rng, width, 8), 1.0),
        LayerKind::PatchEmbed => (
            36,
            LayerSpec::PatchEmbed(PatchEmbed {
                image_side: 6,
                patch: 2,
                weight: gaussian_mat(rng, 3, 4, 0.5),
                bias: gaussian_vec(rng, 3, 0.1),
            }),
            1.0,
        ),
        LayerKind::PositionalAdd => (td, LayerSpec::PositionalAdd(gaussian_mat(rng, tokens, width, 1.0)), 1.0),
        LayerKind::ClsPrepend => (td, LayerSpec::ClsPrepend(gaussian_vec(rng, width, 1.0)), 1.0),
        LayerKind::ClsSelect => (td, LayerSpec::ClsSelect { width }, 1.0),
    };
    (Network::new(d_in, vec![layer]).unwrap(), scale)
}

/// Random smooth `d_in → d_out` network of `depth` affine+activation layers.
pub fn random_smooth_net(rng: &mut impl Rng, dims: &[usize]) -> Network {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let a = gaussian_mat(rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt());
        layers.push(LayerSpec::affine(a, gaussian_vec(rng, w[1], 0.2)));
        layers.push(match i % 3 {
            0 => LayerSpec::Tanh,
            1 => LayerSpec::Sigmoid,
            _ => LayerSpec::GeLU,
        });
    }
    Network::new(dims[0], layers).unwrap()
}

pub fn relative_gap(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).frobenius() / (1.0 + b.frobenius())
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / (1.0 + norm(b))
}

/// `f(x, y) = x` as a network: projection onto the first coordinate.
pub fn first_coordinate_net() -> Network {
    Network::new(2, vec![LayerSpec::affine(Matrix::from_rows(&[[1.0, 0.0]]), vec![0.0])]).unwrap()
}

pub fn identity_net(d: usize) -> Network {
    Network::new(d, vec![LayerSpec::affine(Matrix::identity(d), vec![0.0; d])]).unwrap()
}

pub fn sigmoid_net(d: usize) -> Network {
    Network::new(d, vec![LayerSpec::Sigmoid]).unwrap()
}

/// GeLU hidden layers with an affine head: the metric never vanishes, so
/// long range-direction walks stay well defined.
pub fn gelu_head_net(rng: &mut impl Rng, dims: &[usize]) -> Network {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let a = gaussian_mat(rng, w[1], w[0], 1.0 / (w[0] as f64).sqrt());
        layers.push(LayerSpec::affine(a, gaussian_vec(rng, w[1], 0.2)));
        if i + 2 < dims.len() {
            layers.push(LayerSpec::GeLU);
        }
    }
    Network::new(dims[0], layers).unwrap()
}
