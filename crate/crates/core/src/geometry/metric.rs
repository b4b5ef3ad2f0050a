use std::cell::Cell;
use std::fmt::Write as _;

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, symmetric_eigen, Matrix};
use crate::netcore::Network;

/// Eigenvalues at or below `DEFAULT_NULL_TOL · λ_max` count as null.
pub const DEFAULT_NULL_TOL: f64 = 1e-6;

/// Eigenvalues in `[-NEGATIVE_EIGEN_RTOL · λ_max, 0)` are rounding noise and
/// clamp to zero; anything more negative means the metric is broken.
pub const NEGATIVE_EIGEN_RTOL: f64 = 1e-8;

/// The pullback `g = Jᵀ G J` of the output metric `G` at `point`.
#[derive(Clone, Debug, PartialEq)]
pub struct PullbackMetric {
    pub point: Vec<f64>,
    pub matrix: Matrix,
    pub from_layer: usize,
}

impl PullbackMetric {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Wraps an arbitrary symmetric matrix, e.g. a hand-built metric.
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidArgument("metric must be square".into()));
        }
        let n = matrix.rows();
        Ok(PullbackMetric {
            point: vec![0.0; n],
            matrix: matrix.symmetrized(),
            from_layer: 0,
        })
    }

    /// `vᵀ g v`
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matrix.matvec(v))
    }
}

/// Computes `Jᵀ G J` for the Jacobian of `𝒩_(from_layer)` at `x`. `G`
/// defaults to the identity.
pub fn pullback_metric(
    net: &Network,
    x: &[f64],
    from_layer: usize,
    output_metric: Option<&Matrix>,
) -> Result<PullbackMetric> {
    let jac = net.jacobian(x, from_layer)?;
    let matrix = pullback_of(&jac, output_metric)?;
    if !matrix.all_finite() {
        return Err(Error::NonFinite("pullback metric"));
    }
    Ok(PullbackMetric {
        point: x.to_vec(),
        matrix,
        from_layer,
    })
}

/// `Jᵀ G J`, symmetrized.
pub(crate) fn pullback_of(jac: &Matrix, output_metric: Option<&Matrix>) -> Result<Matrix> {
    let jt = jac.transpose();
    let weighted_t = match output_metric {
        None => jt.clone(),
        Some(g) => {
            check_len("output metric rows", jac.rows(), g.rows())?;
            check_len("output metric cols", jac.rows(), g.cols())?;
            // rows of (G J)ᵀ = Jᵀ Gᵀ
            jt.matmul(&g.transpose())
        }
    };
    let d = jac.cols();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = dot(jt.row(i), weighted_t.row(j));
        }
    }
    Ok(m.symmetrized())
}

/// Spectrum of a pullback metric split into null and range parts.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricDecomposition {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal; column `k` belongs to `eigenvalues[k]`.
    pub eigenvectors: Matrix,
    /// `{ k : λ_k ≤ null_tol · λ_max }`, ascending.
    pub null_indices: Vec<usize>,
    pub lambda_max: f64,
    pub null_tol: f64,
}

impl MetricDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn rank(&self) -> usize {
        self.dim() - self.null_indices.len()
    }

    /// Indices of the non-null eigenvalues, ascending.
    pub fn range_indices(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|k| self.null_indices.binary_search(k).is_err())
            .collect()
    }

    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.column(k)
    }

    pub fn null_vectors(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.null_indices.iter().map(|&k| self.eigenvector(k))
    }

    /// `index,eigenvalue,null` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue,null\n");
        let mut null = self.null_indices.iter().peekable();
        for (k, v) in self.eigenvalues.iter().enumerate() {
            let is_null = null.peek() == Some(&&k);
            if is_null {
                null.next();
            }
            let _ = writeln!(out, "{k},{v:e},{}", u8::from(is_null));
        }
        out
    }
}

thread_local! {
    static DECOMPOSITIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of eigendecompositions performed by [`eigen_split`] on the
/// current thread so far.
pub fn decomposition_count() -> u64 {
    DECOMPOSITIONS.with(Cell::get)
}

/// Symmetric eigendecomposition of `g` with a relative null threshold.
pub fn eigen_split(g: &PullbackMetric, null_tol: f64) -> Result<MetricDecomposition> {
    if !(null_tol > 0.0 && null_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "null tolerance {null_tol} outside (0, 1)"
        )));
    }
    if !g.matrix.is_square() {
        return Err(Error::InvalidArgument("metric must be square".into()));
    }
    if !g.matrix.all_finite() {
        return Err(Error::NonFinite("metric"));
    }
    DECOMPOSITIONS.with(|c| c.set(c.get() + 1));
    let (mut values, vectors) = symmetric_eigen(&g.matrix);
    let lambda_max = values.first().copied().unwrap_or(0.0);
    if !(lambda_max > 0.0) {
        return Err(Error::DegenerateMetric);
    }
    let floor = -NEGATIVE_EIGEN_RTOL * lambda_max;
    for v in values.iter_mut() {
        if *v < floor {
            return Err(Error::NegativeEigenvalue {
                value: *v,
                lambda_max,
            });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let cutoff = null_tol * lambda_max;
    let null_indices = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= cutoff)
        .map(|(k, _)| k)
        .collect();
    Ok(MetricDecomposition {
        eigenvalues: values,
        eigenvectors: vectors,
        null_indices,
        lambda_max,
        null_tol,
    })
}
