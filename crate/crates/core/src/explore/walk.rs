use rand::Rng;

use super::{DeltaPolicy, ExplorationConfig, FeasibleBounds, Mode, StepFailure, StepRecord, Trajectory};
use crate::error::{check_finite, check_len, Error, Result};
use crate::geometry::{decomposition_count, eigen_split, PullbackMetric};
use crate::geometry::metric::pullback_of;
use crate::netcore::Network;
use crate::rng::{stream, StreamRng};

/// Step length for `mode` given the largest eigenvalue of the metric.
pub fn step_size(mode: Mode, lambda_max: f64, policy: DeltaPolicy) -> Result<f64> {
    if !(lambda_max > 0.0) {
        return Err(Error::DegenerateMetric);
    }
    match (policy, mode) {
        (DeltaPolicy::Fixed(d), _) => Ok(d),
        (DeltaPolicy::Auto, Mode::Simec) => Ok(1.0 / lambda_max.sqrt()),
        (DeltaPolicy::Auto, Mode::Simexp) => Ok(2.0 / lambda_max.sqrt()),
        (DeltaPolicy::Auto, Mode::Baseline) => Err(Error::InvalidArgument(
            "the baseline has no metric-based step size".into(),
        )),
    }
}

/// The generator [`run_exploration`] uses for `mode` and `seed`.
pub fn exploration_rng(mode: Mode, seed: u64) -> StreamRng {
    stream(seed, mode.name())
}

/// Embedding coordinates covered by the selected segments, ascending.
/// `None` when every coordinate may move.
pub fn selected_coords(net: &Network, selection: Option<&[usize]>) -> Result<Option<Vec<usize>>> {
    let Some(sel) = selection else {
        return Ok(None);
    };
    let layout = net.layout();
    let mut segs = sel.to_vec();
    segs.sort_unstable();
    segs.dedup();
    if let Some(&bad) = segs.iter().find(|&&s| s >= layout.segments) {
        return Err(Error::InvalidArgument(format!(
            "segment {bad} out of range (layout has {} segments)",
            layout.segments
        )));
    }
    Ok(Some(segs.into_iter().flat_map(|s| layout.coords(s)).collect()))
}

/// One SiMEC step: a random null eigenvector with a random sign.
pub fn simec_step(
    net: &Network,
    p: &[f64],
    cfg: &ExplorationConfig,
    rng: &mut StreamRng,
) -> Result<(Vec<f64>, StepRecord)> {
    eigen_step(net, p, cfg, Mode::Simec, rng)
}

/// One SiMExp step: a random non-null eigenvector with a random sign.
pub fn simexp_step(
    net: &Network,
    p: &[f64],
    cfg: &ExplorationConfig,
    rng: &mut StreamRng,
) -> Result<(Vec<f64>, StepRecord)> {
    eigen_step(net, p, cfg, Mode::Simexp, rng)
}

fn eigen_step(
    net: &Network,
    p: &[f64],
    cfg: &ExplorationConfig,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<(Vec<f64>, StepRecord)> {
    let from = net.embed_boundary();
    check_len("exploration point", net.embed_dim(), p.len())?;
    let coords = selected_coords(net, cfg.selection.as_deref())?;
    // With a selection, only the selected Jacobian columns are formed: their
    // Gram matrix is exactly the diagonal block of the full metric.
    let jac = match &coords {
        Some(c) => net.jacobian_columns(p, from, c)?,
        None => net.jacobian(p, from)?,
    };
    let metric = PullbackMetric {
        point: p.to_vec(),
        matrix: pullback_of(&jac, None)?,
        from_layer: from,
    };
    let before = decomposition_count();
    let dec = eigen_split(&metric, cfg.null_tol)?;
    let decompositions = decomposition_count() - before;

    let candidates = match mode {
        Mode::Simec => dec.null_indices.clone(),
        _ => dec.range_indices(),
    };
    if candidates.is_empty() {
        return Err(match mode {
            Mode::Simec => Error::EmptyNullSpace,
            _ => Error::EmptyRangeSpace,
        });
    }
    let direction = candidates[rng.gen_range(0..candidates.len())];
    let sign: i8 = if rng.gen::<bool>() { 1 } else { -1 };
    let delta = step_size(mode, dec.lambda_max, cfg.delta)?;
    let v = dec.eigenvector(direction);
    let scale = f64::from(sign) * delta;

    let mut next = p.to_vec();
    match &coords {
        Some(c) => {
            for (&i, vi) in c.iter().zip(&v) {
                next[i] += scale * vi;
            }
        }
        None => {
            for (x, vi) in next.iter_mut().zip(&v) {
                *x += scale * vi;
            }
        }
    }
    Ok((
        next,
        StepRecord {
            delta,
            direction,
            sign,
            eigenvalue: dec.eigenvalues[direction],
            lambda_max: dec.lambda_max,
            null_dim: dec.null_indices.len(),
            decompositions,
            reinitialized: false,
        },
    ))
}

fn clamp_into(p: &mut [f64], bounds: &FeasibleBounds, coords: Option<&[usize]>) {
    match coords {
        Some(c) => {
            for &i in c {
                p[i] = p[i].clamp(bounds.lower[i], bounds.upper[i]);
            }
        }
        None => {
            for (i, v) in p.iter_mut().enumerate() {
                *v = v.clamp(bounds.lower[i], bounds.upper[i]);
            }
        }
    }
}

/// Runs `cfg.max_iters` SiMEC or SiMExp steps from `p0` in the embedding
/// space of `net`.
///
/// A failing step ends the run early; the partial trajectory is returned
/// with [`Trajectory::error`] set. Configuration errors are returned as
/// `Err`. When bounds are given, only the selected coordinates are clamped,
/// so unselected coordinates never change.
pub fn run_exploration(net: &Network, p0: &[f64], cfg: &ExplorationConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if cfg.mode == Mode::Baseline {
        return Err(Error::InvalidArgument(
            "the baseline runs in pixel space; use perturbation_baseline".into(),
        ));
    }
    let from = net.embed_boundary();
    check_len("exploration start", net.embed_dim(), p0.len())?;
    check_finite("exploration start", p0)?;
    if let Some(b) = &cfg.bounds {
        check_len("exploration bounds", net.embed_dim(), b.dim())?;
    }
    let coords = selected_coords(net, cfg.selection.as_deref())?;

    let mut rng = exploration_rng(cfg.mode, cfg.seed);
    let mut p = p0.to_vec();
    let mut points = vec![p.clone()];
    let mut indices = vec![0];
    let mut steps = Vec::with_capacity(cfg.max_iters);
    let mut error = None;

    for k in 0..cfg.max_iters {
        let result = match cfg.mode {
            Mode::Simec => simec_step(net, &p, cfg, &mut rng),
            _ => simexp_step(net, &p, cfg, &mut rng),
        };
        match result {
            Ok((next, record)) => {
                p = next;
                if cfg.project_every_step {
                    if let Some(b) = &cfg.bounds {
                        clamp_into(&mut p, b, coords.as_deref());
                    }
                }
                steps.push(record);
                let taken = k + 1;
                if taken % cfg.record_every == 0 || taken == cfg.max_iters {
                    points.push(p.clone());
                    indices.push(taken);
                }
            }
            Err(e) => {
                if indices.last() != Some(&k) {
                    points.push(p.clone());
                    indices.push(k);
                }
                error = Some(StepFailure {
                    step: k,
                    tag: e.tag().to_string(),
                    message: e.to_string(),
                });
                break;
            }
        }
    }

    if !cfg.project_every_step {
        if let Some(b) = &cfg.bounds {
            for q in points.iter_mut() {
                clamp_into(q, b, coords.as_deref());
            }
        }
    }

    let mut outputs = Vec::with_capacity(points.len());
    for (r, q) in points.iter().enumerate() {
        match net.output(q, from) {
            Ok(y) => outputs.push(y),
            Err(e) => {
                let step = indices[r];
                points.truncate(r);
                indices.truncate(r);
                if error.is_none() {
                    error = Some(StepFailure {
                        step,
                        tag: e.tag().to_string(),
                        message: e.to_string(),
                    });
                }
                break;
            }
        }
    }
    steps.truncate(indices.last().copied().unwrap_or(0));

    Ok(Trajectory {
        mode: cfg.mode,
        seed: cfg.seed,
        selection: cfg.selection.clone(),
        from_layer: from,
        points,
        outputs,
        indices,
        steps,
        error,
    })
}
