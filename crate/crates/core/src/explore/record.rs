//! Trajectory files: `trajectory.json` (manifest), `points.csv` (one row
//! per recorded point: step index, coordinates, outputs), `steps.csv`, and
//! optionally `points.f32` holding the coordinates as little-endian `f32`
//! for long runs, in which case `points.csv` carries only the outputs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mode, StepFailure, StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::fsio;

pub const TRAJECTORY_FORMAT: &str = "fiberwalk-trajectory";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub format: String,
    pub mode: Mode,
    pub seed: u64,
    pub selection: Option<Vec<usize>>,
    pub from_layer: usize,
    pub dim: usize,
    pub output_dim: usize,
    pub recorded: usize,
    pub steps: usize,
    pub error: Option<StepFailure>,
    /// `sha256` of `points.f32` when the coordinates live there.
    pub blob_sha256: Option<String>,
    /// The configuration that produced the run.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

const MANIFEST: &str = "trajectory.json";
const POINTS: &str = "points.csv";
const STEPS: &str = "steps.csv";
const BLOB: &str = "points.f32";

fn push_row(out: &mut String, values: impl IntoIterator<Item = String>) {
    let row: Vec<String> = values.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

/// Writes the trajectory into `dir`. Returns the manifest.
pub fn save_trajectory(
    traj: &Trajectory,
    dir: impl AsRef<Path>,
    config: serde_json::Value,
    use_blob: bool,
) -> Result<TrajectoryManifest> {
    let dir = dir.as_ref();
    let dim = traj.points[0].len();
    let output_dim = traj.outputs.first().map_or(0, Vec::len);

    let mut points = String::new();
    let mut header = vec!["step".to_string()];
    if !use_blob {
        header.extend((0..dim).map(|i| format!("p{i}")));
    }
    header.extend((0..output_dim).map(|i| format!("y{i}")));
    push_row(&mut points, header);
    for ((p, y), k) in traj.points.iter().zip(&traj.outputs).zip(&traj.indices) {
        let mut row = vec![k.to_string()];
        if !use_blob {
            row.extend(p.iter().map(f64::to_string));
        }
        row.extend(y.iter().map(f64::to_string));
        push_row(&mut points, row);
    }

    let mut steps = String::from("step,delta,direction,sign,eigenvalue,lambda_max,null_dim,decompositions,reinitialized\n");
    for (k, s) in traj.steps.iter().enumerate() {
        let _ = writeln!(
            steps,
            "{k},{},{},{},{},{},{},{},{}",
            s.delta,
            s.direction,
            s.sign,
            s.eigenvalue,
            s.lambda_max,
            s.null_dim,
            s.decompositions,
            u8::from(s.reinitialized)
        );
    }

    let blob_sha256 = if use_blob {
        let mut blob = Vec::with_capacity(traj.points.len() * dim * 4);
        for p in &traj.points {
            for &v in p {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fsio::write_atomic(dir.join(BLOB), &blob)?;
        Some(fsio::sha256_hex(&blob))
    } else {
        None
    };

    let manifest = TrajectoryManifest {
        format: TRAJECTORY_FORMAT.to_string(),
        mode: traj.mode,
        seed: traj.seed,
        selection: traj.selection.clone(),
        from_layer: traj.from_layer,
        dim,
        output_dim,
        recorded: traj.points.len(),
        steps: traj.steps.len(),
        error: traj.error.clone(),
        blob_sha256,
        config,
    };
    fsio::write_atomic(dir.join(POINTS), points.as_bytes())?;
    fsio::write_atomic(dir.join(STEPS), steps.as_bytes())?;
    fsio::write_atomic(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn parse_f64(field: &str, what: &'static str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(what, format!("not a number: {field:?}")))
}

fn parse_usize(field: &str, what: &'static str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(what, format!("not an index: {field:?}")))
}

/// Reads a trajectory written by [`save_trajectory`]. Points stored in the
/// blob come back rounded to `f32`.
pub fn load_trajectory(dir: impl AsRef<Path>) -> Result<(Trajectory, TrajectoryManifest)> {
    let dir = dir.as_ref();
    let manifest: TrajectoryManifest = serde_json::from_str(&fsio::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != TRAJECTORY_FORMAT {
        return Err(Error::format("trajectory manifest", format!("format {:?}", manifest.format)));
    }
    let with_points = manifest.blob_sha256.is_none();
    let width = 1 + manifest.output_dim + if with_points { manifest.dim } else { 0 };

    let text = fsio::read_to_string(dir.join(POINTS))?;
    let mut indices = Vec::new();
    let mut points = Vec::new();
    let mut outputs = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::format("points csv", format!("expected {width} fields, got {}", fields.len())));
        }
        indices.push(parse_usize(fields[0], "points csv")?);
        let nums = fields[1..]
            .iter()
            .map(|f| parse_f64(f, "points csv"))
            .collect::<Result<Vec<f64>>>()?;
        let split = if with_points { manifest.dim } else { 0 };
        if with_points {
            points.push(nums[..split].to_vec());
        }
        outputs.push(nums[split..].to_vec());
    }

    if let Some(expected) = &manifest.blob_sha256 {
        let path = dir.join(BLOB);
        let blob = fsio::read(&path)?;
        let actual = fsio::sha256_hex(&blob);
        if &actual != expected {
            return Err(Error::Checksum {
                path,
                expected: expected.clone(),
                actual,
            });
        }
        if blob.len() != manifest.recorded * manifest.dim * 4 {
            return Err(Error::format("points blob", format!("{} bytes", blob.len())));
        }
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        points = values.chunks(manifest.dim.max(1)).map(<[f64]>::to_vec).collect();
    }
    if points.len() != manifest.recorded || outputs.len() != manifest.recorded {
        return Err(Error::format(
            "trajectory",
            format!("manifest declares {} recorded points, files hold {}", manifest.recorded, points.len()),
        ));
    }

    let text = fsio::read_to_string(dir.join(STEPS))?;
    let mut steps = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::format("steps csv", format!("expected 9 fields, got {}", f.len())));
        }
        let sign: i8 = f[3]
            .parse()
            .map_err(|_| Error::format("steps csv", format!("bad sign {:?}", f[3])))?;
        steps.push(StepRecord {
            delta: parse_f64(f[1], "steps csv")?,
            direction: parse_usize(f[2], "steps csv")?,
            sign,
            eigenvalue: parse_f64(f[4], "steps csv")?,
            lambda_max: parse_f64(f[5], "steps csv")?,
            null_dim: parse_usize(f[6], "steps csv")?,
            decompositions: parse_usize(f[7], "steps csv")? as u64,
            reinitialized: f[8] == "1",
        });
    }

    let traj = Trajectory {
        mode: manifest.mode,
        seed: manifest.seed,
        selection: manifest.selection.clone(),
        from_layer: manifest.from_layer,
        points,
        outputs,
        indices,
        steps,
        error: manifest.error.clone(),
    };
    Ok((traj, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explore::{run_exploration, ExplorationConfig};
    use crate::linalg::Matrix;
    use crate::netcore::{LayerSpec, Network};

    fn sample() -> Trajectory {
        let net = Network::new(3, vec![LayerSpec::affine(Matrix::from_rows(&[[1.0, 2.0, 0.5]]), vec![0.1])]).unwrap();
        run_exploration(&net, &[0.3, -0.2, 1.7], &ExplorationConfig::new(Mode::Simec, 6, 4)).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample();
        save_trajectory(&t, dir.path(), serde_json::json!({"k": 6}), false).unwrap();
        let (back, m) = load_trajectory(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(m.config["k"], 6);
    }

    #[test]
    fn blob_round_trip_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample();
        save_trajectory(&t, dir.path(), serde_json::Value::Null, true).unwrap();
        let (back, _) = load_trajectory(dir.path()).unwrap();
        for (a, b) in back.points.iter().flatten().zip(t.points.iter().flatten()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        assert_eq!(back.outputs, t.outputs);
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_trajectory(&sample(), dir.path(), serde_json::Value::Null, true).unwrap();
        let path = dir.path().join(BLOB);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_trajectory(dir.path()), Err(Error::Checksum { .. })));
    }
}
