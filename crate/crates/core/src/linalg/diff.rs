use crate::error::{invalid, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(invalid("finite_diff_gradient: step must be positive"));
    }
    let mut x = x0.to_vec();
    let mut grad = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = f(&x);
        x[i] = x0[i] - h;
        let down = f(&x);
        x[i] = x0[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(invalid(format!(
                "finite_diff_gradient: non-finite evaluation at coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
