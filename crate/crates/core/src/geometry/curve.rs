use crate::error::{check_len, Error, Result};
use crate::linalg::{distance, norm};
use crate::netcore::Network;

/// A curve sampled at uniformly spaced parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    samples: Vec<Vec<f64>>,
}

impl Curve {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a curve needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let d = samples[0].len();
        for s in &samples {
            check_len("curve sample", d, s.len())?;
        }
        Ok(Curve { samples })
    }

    /// `n` evenly spaced samples on the segment `a → b`.
    pub fn segment(a: &[f64], b: &[f64], n: usize) -> Result<Self> {
        check_len("segment endpoint", a.len(), b.len())?;
        if n < 2 {
            return Err(Error::InvalidArgument("a segment needs at least 2 samples".into()));
        }
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
            })
            .collect();
        Curve::new(samples)
    }

    /// Samples `f(t)` at `n` uniform parameters in `[0, 1]`.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("a curve needs at least 2 samples".into()));
        }
        Curve::new((0..n).map(|k| f(k as f64 / (n - 1) as f64)).collect())
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn segments(&self) -> usize {
        self.samples.len() - 1
    }

    /// Euclidean polyline length.
    pub fn polyline_length(&self) -> f64 {
        self.samples.windows(2).map(|w| distance(&w[0], &w[1])).sum()
    }
}

/// Squared pseudo-norm `Δᵀ g Δ` of every segment, with `g` the pullback at
/// the segment midpoint. For the identity output metric `Δᵀ JᵀJ Δ = |JΔ|²`,
/// so a single JVP per segment replaces forming the full metric.
fn segment_sq_norms(net: &Network, curve: &Curve, from_layer: usize) -> Result<Vec<f64>> {
    check_len("curve dimension", net.dims()[from_layer], curve.dim())?;
    curve
        .samples
        .windows(2)
        .map(|w| {
            let mid: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect();
            let delta: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
            let jd = net.jvp(&mid, &delta, from_layer)?;
            let q = norm(&jd);
            Ok((q * q).max(0.0))
        })
        .collect()
}

/// Pseudolength `∫ ‖γ̇‖_g` by the midpoint rule.
pub fn curve_pseudolength(net: &Network, curve: &Curve, from_layer: usize) -> Result<f64> {
    Ok(segment_sq_norms(net, curve, from_layer)?
        .into_iter()
        .map(f64::sqrt)
        .sum())
}

/// Energy `∫₀¹ ‖γ̇‖²_g` by the midpoint rule, taking the curve parameter on
/// `[0, 1]` so each segment spans `1/N` of it.
pub fn curve_energy(net: &Network, curve: &Curve, from_layer: usize) -> Result<f64> {
    let n = curve.segments() as f64;
    Ok(segment_sq_norms(net, curve, from_layer)?
        .into_iter()
        .map(|q| n * q)
        .sum())
}

/// Euclidean polyline length of the curve's image in the output space.
pub fn pushforward_length(net: &Network, curve: &Curve, from_layer: usize) -> Result<f64> {
    check_len("curve dimension", net.dims()[from_layer], curve.dim())?;
    let images = curve
        .samples
        .iter()
        .map(|s| net.output(s, from_layer))
        .collect::<Result<Vec<_>>>()?;
    Ok(images.windows(2).map(|w| distance(&w[0], &w[1])).sum())
}

/// Pseudolength of the straight segment `x → y`. This bounds the
/// pseudodistance from above; the infimum over all curves is not computed.
pub fn pseudodistance_upper_bound(
    net: &Network,
    x: &[f64],
    y: &[f64],
    n_samples: usize,
    from_layer: usize,
) -> Result<f64> {
    let curve = Curve::segment(x, y, n_samples)?;
    curve_pseudolength(net, &curve, from_layer)
}
