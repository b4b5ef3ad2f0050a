use rand::Rng;
use rand_distr::StandardNormal;

use super::{Mode, StepRecord, Trajectory};
use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg::{axpy, dot};
use crate::netcore::Network;
use crate::rng::{stream, StreamRng};

/// Probability of redrawing the perturbation at each step.
pub const DEFAULT_REINIT_PROB: f64 = 0.2;

fn standard_normal(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn argmax(y: &[f64]) -> usize {
    y.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Trial-and-error explorer in pixel space.
///
/// Keeps a perturbation `v` and updates it as `v ← a·v + η·ε`, where `ε` is
/// standard normal noise made orthogonal to `v`, and `a` is `+1` if the
/// last step kept the predicted label and `-1` if it changed it. With
/// probability `reinit_prob` the perturbation is instead redrawn from a
/// standard normal. The image moves by `v` each step and is clamped to
/// `[0, 1]`.
pub fn perturbation_baseline(
    net: &Network,
    x0: &[f64],
    iters: usize,
    eta: f64,
    reinit_prob: f64,
    seed: u64,
) -> Result<Trajectory> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    if !(0.0..=1.0).contains(&reinit_prob) {
        return Err(Error::InvalidArgument(format!(
            "reinit probability {reinit_prob} outside [0, 1]"
        )));
    }
    check_len("baseline start", net.input_dim(), x0.len())?;
    check_finite("baseline start", x0)?;

    let d = x0.len();
    let mut rng = stream(seed, Mode::Baseline.name());
    let mut x = x0.to_vec();
    let y0 = net.output(&x, 0)?;
    let mut label = argmax(&y0);
    let mut points = vec![x.clone()];
    let mut outputs = vec![y0];
    let mut steps = Vec::with_capacity(iters);
    let mut v = standard_normal(&mut rng, d);
    let mut a: i8 = 1;

    for _ in 0..iters {
        let reinitialized = rng.gen::<f64>() < reinit_prob;
        if reinitialized {
            v = standard_normal(&mut rng, d);
        } else {
            let mut eps = standard_normal(&mut rng, d);
            let vv = dot(&v, &v);
            if vv > 0.0 {
                let c = dot(&eps, &v) / vv;
                axpy(-c, &v, &mut eps);
            }
            for (vi, ei) in v.iter_mut().zip(&eps) {
                *vi = f64::from(a) * *vi + eta * ei;
            }
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi = (*xi + vi).clamp(0.0, 1.0);
        }
        let y = net.output(&x, 0)?;
        let next_label = argmax(&y);
        steps.push(StepRecord {
            delta: eta,
            direction: 0,
            sign: a,
            eigenvalue: 0.0,
            lambda_max: 0.0,
            null_dim: 0,
            decompositions: 0,
            reinitialized,
        });
        a = if next_label == label { 1 } else { -1 };
        label = next_label;
        points.push(x.clone());
        outputs.push(y);
    }

    Ok(Trajectory {
        mode: Mode::Baseline,
        seed,
        selection: None,
        from_layer: 0,
        indices: (0..points.len()).collect(),
        points,
        outputs,
        steps,
        error: None,
    })
}
