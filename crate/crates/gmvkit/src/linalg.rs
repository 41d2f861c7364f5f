//! Small dense linear-algebra helpers shared across the crate.
//!
//! The heavy lifting (symmetric eigendecomposition, Cholesky) is delegated to
//! `nalgebra`; what lives here is the glue the rest of the crate needs:
//! descending-ordered eigensystems, SPD solves, PSD square roots, and a
//! matrix-free power iteration that only sees the action `v ↦ Av`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Neumaier-compensated sum; keeps the budget-constraint checks accurate
/// even for long vectors.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut compensation = 0.0;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            compensation += (sum - t) + x;
        } else {
            compensation += (x - t) + sum;
        }
        sum = t;
    }
    sum + compensation
}

/// Outcome of a power iteration run.
#[derive(Debug, Clone)]
pub struct PowerIteration {
    /// Rayleigh-quotient estimate of the dominant eigenvalue.
    pub eigenvalue: f64,
    /// Unit-norm estimate of the dominant eigenvector.
    pub eigenvector: DVector<f64>,
}

/// Power iteration through an arbitrary action `apply(v, out)` writing `A v`
/// into `out`. Returns `None` if the action collapses the iterate to
/// (numerically) zero, which signals a zero operator or an unlucky start.
pub fn power_iteration<F>(
    start: &DVector<f64>,
    iterations: usize,
    mut apply: F,
) -> Option<PowerIteration>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>),
{
    let n = start.len();
    let mut v = start.clone();
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v /= norm;
    let mut av = DVector::zeros(n);
    let mut eigenvalue = 0.0;
    for _ in 0..iterations {
        apply(&v, &mut av);
        eigenvalue = v.dot(&av);
        let norm = av.norm();
        if norm < f64::MIN_POSITIVE.sqrt() || !norm.is_finite() {
            return if eigenvalue.abs() <= f64::EPSILON {
                // Zero operator: eigenvalue 0 with the current direction.
                Some(PowerIteration {
                    eigenvalue: 0.0,
                    eigenvector: v,
                })
            } else {
                None
            };
        }
        v.copy_from(&av);
        v /= norm;
    }
    Some(PowerIteration {
        eigenvalue,
        eigenvector: v,
    })
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order
/// and eigenvector columns aligned to them.
pub fn symmetric_eigen_desc(matrix: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: matrix.ncols(),
        });
    }
    let eigen = matrix
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eigen.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors
            .column_mut(dst)
            .copy_from(&eigen.eigenvectors.column(src));
    }
    Ok((eigenvalues, eigenvectors))
}

/// Eigenvalues only, descending.
pub fn symmetric_eigenvalues_desc(matrix: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: matrix.ncols(),
        });
    }
    let mut values: Vec<f64> = matrix.clone().symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.partial_cmp(a).expect("eigenvalues are finite"));
    Ok(DVector::from_vec(values))
}

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd(matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = matrix.clone().cholesky().ok_or(Error::SingularCovariance {
        condition: f64::INFINITY,
    })?;
    Ok(chol.solve(rhs))
}

/// Symmetric PSD square root `A^{1/2} = V diag(√λ) Vᵀ`. Small negative
/// eigenvalues (round-off) are clamped to zero; genuinely indefinite input is
/// an error.
pub fn psd_sqrt(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = symmetric_eigen_desc(matrix)?;
    let top = values[0].max(0.0);
    let tol = 1e-8 * top.max(f64::MIN_POSITIVE);
    if values[values.len() - 1] < -tol {
        return Err(Error::Numerical(format!(
            "matrix is not PSD: smallest eigenvalue {:e}",
            values[values.len() - 1]
        )));
    }
    let n = matrix.nrows();
    let mut scaled = vectors.clone();
    for j in 0..n {
        let s = values[j].max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    Ok(&scaled * vectors.transpose())
}
