//! Dense classical Kalman filter used as a brute-force reference for the
//! factorized cell.

use nalgebra::{DMatrix, DVector};

use crate::belief::BeliefState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_square(what: &'static str, mat: &DMatrix<f64>, n: usize) -> Result<()> {
    if mat.nrows() != n || mat.ncols() != n {
        return Err(Error::ShapeMismatch {
            context: what,
            expected: n,
            got: if mat.nrows() != n { mat.nrows() } else { mat.ncols() },
        });
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `(A x, A Σ Aᵀ + Q)`
pub fn dense_predict(g: &DenseGaussian, a: &DMatrix<f64>, trans_cov: &DMatrix<f64>) -> Result<DenseGaussian> {
    let n = g.mean.len();
    check_square("dense_predict covariance", &g.cov, n)?;
    check_square("dense_predict transition", a, n)?;
    check_square("dense_predict transition noise", trans_cov, n)?;
    Ok(DenseGaussian {
        mean: a * &g.mean,
        cov: symmetrize(&(a * &g.cov * a.transpose() + trans_cov)),
    })
}

/// Kalman update with `H = [I_m 0]` and diagonal observation covariance
/// `obs_var` (length `m`).
///
/// The gain is obtained from a Cholesky solve of the innovation covariance.
pub fn dense_update(g: &DenseGaussian, w: &[f64], obs_var: &[f64]) -> Result<DenseGaussian> {
    let n = g.mean.len();
    let m = w.len();
    check_square("dense_update covariance", &g.cov, n)?;
    if m > n || obs_var.len() != m {
        return Err(Error::ShapeMismatch {
            context: "dense_update observation",
            expected: m,
            got: obs_var.len(),
        });
    }
    let h = DMatrix::from_fn(m, n, |i, j| if i == j { 1.0 } else { 0.0 });
    let s = &h * &g.cov * h.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(obs_var));
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solve("innovation covariance is not positive definite".into()))?;
    // Q = Σ Hᵀ S⁻¹  <=>  S Qᵀ = H Σ
    let gain = chol.solve(&(&h * &g.cov)).transpose();
    let innovation = DVector::from_column_slice(w) - &h * &g.mean;
    let mean = &g.mean + &gain * innovation;
    let cov = (DMatrix::identity(n, n) - &gain * &h) * &g.cov;
    Ok(DenseGaussian {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Dense embedding of a factorized belief.
pub fn embed(b: &BeliefState) -> DenseGaussian {
    let m = b.m();
    let mut cov = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        cov[(i, i)] = b.var_upper[i];
        cov[(m + i, m + i)] = b.var_lower[i];
        cov[(i, m + i)] = b.var_side[i];
        cov[(m + i, i)] = b.var_side[i];
    }
    DenseGaussian {
        mean: DVector::from_column_slice(&b.mean),
        cov,
    }
}

/// Reads the factorized entries back; everything else in `cov` is ignored.
pub fn extract(g: &DenseGaussian) -> Result<BeliefState> {
    let n = g.mean.len();
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidDimension(format!(
            "cannot factorize a state of odd or zero size {n}"
        )));
    }
    check_square("extract covariance", &g.cov, n)?;
    let m = n / 2;
    Ok(BeliefState {
        mean: g.mean.iter().copied().collect(),
        var_upper: (0..m).map(|i| g.cov[(i, i)]).collect(),
        var_lower: (0..m).map(|i| g.cov[(m + i, m + i)]).collect(),
        var_side: (0..m).map(|i| g.cov[(i, m + i)]).collect(),
    })
}

/// Dense matrix from row vectors.
pub fn dense_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, c, |i, j| rows[i][j])
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(cov: &DMatrix<f64>) -> f64 {
    symmetrize(cov)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
