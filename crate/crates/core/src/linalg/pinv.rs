use super::{compact_svd, dot, norm, Matrix};
use crate::error::{invalid, Error, Result};

pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Relative norm of the out-of-range component above which a quadratic form
/// query is rejected; anything smaller is projected away.
pub const RANGE_TOLERANCE: f64 = 1e-8;

/// `vᵀ g⁺ v` for a symmetric positive semidefinite `g`.
pub fn psd_quadform_pinv(g: &Matrix, v: &[f64]) -> Result<f64> {
    let (r, c) = g.shape();
    if r != c || r != v.len() {
        return Err(invalid(format!(
            "psd_quadform_pinv: metric {r}x{c} vs vector {}",
            v.len()
        )));
    }
    let scale = g.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if g.max_abs_asymmetry() > SYMMETRY_TOLERANCE * scale {
        return Err(invalid("psd_quadform_pinv: metric is not symmetric"));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(0.0);
    }
    let svd = compact_svd(g)?;
    let coeffs = svd.left.t_matvec(v);
    let in_range = svd.left.matvec(&coeffs);
    let residual: Vec<f64> = v.iter().zip(&in_range).map(|(a, b)| a - b).collect();
    let rel = norm(&residual) / vn;
    if rel > RANGE_TOLERANCE {
        return Err(Error::OutOfRange { residual: rel });
    }
    let right_coeffs = svd.right.matvec(v);
    Ok(coeffs
        .iter()
        .zip(&right_coeffs)
        .zip(&svd.singular)
        .map(|((a, b), s)| a * b / s)
        .sum())
}

/// Solve `g x = b` for symmetric positive definite `g` by Cholesky.
pub fn cholesky_solve(g: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = g.rows();
    if g.cols() != n || b.len() != n {
        return Err(invalid("cholesky_solve: shape mismatch"));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = g[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                if s <= 0.0 {
                    return Err(invalid("cholesky_solve: metric not positive definite"));
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - dot(&l.row(i)[..i], &y[..i])) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}
