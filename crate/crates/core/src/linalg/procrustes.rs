use super::Matrix;
use crate::error::{Error, Result};

/// Orthogonal `R` minimising `‖A·R − B‖_F`.
///
/// With `Aᵀ·B = U·Σ·Vᵀ` the minimiser is `R = U·Vᵀ`. Rank-deficient inputs
/// (including `n < d`) still get an orthogonal minimiser.
pub fn procrustes(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::degenerate(format!(
            "procrustes on mismatched shapes {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let m = a.t_matmul(b)?;
    let svd = m.to_nalgebra().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::degenerate("SVD did not converge")),
    };
    Ok(Matrix::from_nalgebra(&(u * v_t)))
}
