//! Pullback metrics, their null/range split, and curve functionals.

mod curve;
pub(crate) mod metric;

pub use curve::{
    curve_energy, curve_pseudolength, pseudodistance_upper_bound, pushforward_length, Curve,
};
pub use metric::{
    decomposition_count, eigen_split, pullback_metric, MetricDecomposition, PullbackMetric,
    DEFAULT_NULL_TOL, NEGATIVE_EIGEN_RTOL,
};
