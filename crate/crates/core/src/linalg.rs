use nalgebra::DMatrix;

/// Largest condition number accepted when inverting a symmetric positive
/// definite matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Inverse of a symmetric matrix that must be positive definite with
/// condition number at most [`MAX_CONDITION`]. On failure returns the
/// observed condition number (infinite when not positive definite).
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min > 0.0) {
        return Err(f64::INFINITY);
    }
    let cond = max / min;
    if cond > MAX_CONDITION {
        return Err(cond);
    }
    match sym.cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => Err(f64::INFINITY),
    }
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}
