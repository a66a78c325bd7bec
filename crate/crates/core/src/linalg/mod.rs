//! Dense linear algebra and differentiation oracles.
//!
//! Everything here works on small row-major `f64` matrices. The compact SVD
//! uses one-sided Jacobi rotations, which is plenty for the p ≤ a few dozen
//! metrics the influence measures produce.

mod diff;
mod matrix;
mod pinv;
mod svd;

pub use diff::{finite_diff_gradient, DEFAULT_STEP};
pub use matrix::Matrix;
pub use pinv::{cholesky_solve, psd_quadform_pinv, RANGE_TOLERANCE, SYMMETRY_TOLERANCE};
pub use svd::{compact_svd, rank_tolerance, CompactSvd};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
