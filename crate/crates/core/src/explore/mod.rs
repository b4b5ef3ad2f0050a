//! Walking through the embedding space along eigendirections of the
//! pullback metric: null directions stay inside an equivalence class,
//! range directions leave it. A pixel-space random-perturbation explorer is
//! included as a point of comparison.

mod baseline;
mod record;
mod walk;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::DEFAULT_NULL_TOL;

pub use baseline::{perturbation_baseline, DEFAULT_REINIT_PROB};
pub use record::{load_trajectory, save_trajectory, TrajectoryManifest, TRAJECTORY_FORMAT};
pub use walk::{exploration_rng, run_exploration, selected_coords, simec_step, simexp_step, step_size};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simec,
    Simexp,
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simec => "simec",
            Mode::Simexp => "simexp",
            Mode::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simec" => Ok(Mode::Simec),
            "simexp" => Ok(Mode::Simexp),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?} (expected simec, simexp or baseline)"
            ))),
        }
    }
}

/// How the step length is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaPolicy {
    /// `1/√λ_max` for SiMEC, `2/√λ_max` for SiMExp.
    Auto,
    Fixed(f64),
}

/// Per-dimension box used to cap explored points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FeasibleBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len("bounds", lower.len(), upper.len())?;
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::InvalidArgument(format!(
                "bounds cross at coordinate {i}: {} > {}",
                lower[i], upper[i]
            )));
        }
        Ok(FeasibleBounds { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().enumerate().all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }
}

/// Clamps `p` into `bounds` elementwise.
pub fn project_feasible(p: &[f64], bounds: &FeasibleBounds) -> Result<Vec<f64>> {
    check_len("projected point", bounds.dim(), p.len())?;
    Ok(p.iter()
        .enumerate()
        .map(|(i, &v)| v.clamp(bounds.lower[i], bounds.upper[i]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub mode: Mode,
    pub max_iters: usize,
    pub null_tol: f64,
    pub delta: DeltaPolicy,
    pub seed: u64,
    /// Segments allowed to move. `None` means all coordinates.
    pub selection: Option<Vec<usize>>,
    /// Keep every `record_every`-th point (the start and the last point are
    /// always kept).
    pub record_every: usize,
    pub bounds: Option<FeasibleBounds>,
    /// Clamp after every step instead of once at the end.
    pub project_every_step: bool,
}

impl ExplorationConfig {
    pub fn new(mode: Mode, max_iters: usize, seed: u64) -> Self {
        ExplorationConfig {
            mode,
            max_iters,
            null_tol: DEFAULT_NULL_TOL,
            delta: DeltaPolicy::Auto,
            seed,
            selection: None,
            record_every: 1,
            bounds: None,
            project_every_step: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        if !(self.null_tol > 0.0 && self.null_tol < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "null tolerance {} outside (0, 1)",
                self.null_tol
            )));
        }
        if let DeltaPolicy::Fixed(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidArgument(format!("fixed delta must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

/// What happened in one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub delta: f64,
    /// Eigenvector index in the (possibly restricted) decomposition; unused
    /// by the baseline.
    pub direction: usize,
    pub sign: i8,
    pub eigenvalue: f64,
    pub lambda_max: f64,
    pub null_dim: usize,
    /// Eigendecompositions performed during the step.
    pub decompositions: u64,
    /// Baseline only: the perturbation was redrawn.
    pub reinitialized: bool,
}

/// Why a run stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFailure {
    pub step: usize,
    pub tag: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mode: Mode,
    pub seed: u64,
    pub selection: Option<Vec<usize>>,
    /// Layer whose space the points live in.
    pub from_layer: usize,
    /// Recorded points; `points[0]` is the start.
    pub points: Vec<Vec<f64>>,
    /// Network output at each recorded point.
    pub outputs: Vec<Vec<f64>>,
    /// Step index of each recorded point.
    pub indices: Vec<usize>,
    /// One record per step taken.
    pub steps: Vec<StepRecord>,
    pub error: Option<StepFailure>,
}

impl Trajectory {
    pub fn deltas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.delta).collect()
    }

    pub fn start(&self) -> &[f64] {
        &self.points[0]
    }

    pub fn last(&self) -> &[f64] {
        self.points.last().expect("a trajectory holds its start point")
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }
}
