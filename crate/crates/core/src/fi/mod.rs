//! The FI measure and the competing stability measures.
//!
//! For f(ω) = −log P(y_pred | ω) and per-class scores s_y = ∂_ω log P(y | ω),
//! the metric tensor is G = Σ_y P(y) s_y s_yᵀ = B₀B₀ᵀ, where B₀ is p×K with
//! columns √P(y)·s_y, and FI = ∇fᵀ G⁺ ∇f. The pseudo-inverse is evaluated
//! from the compact SVD B₀ = V₀Λ₀U₀ as ‖Λ₀⁻¹V₀ᵀ∇f‖².

mod baseline;
mod map;

use serde::{Deserialize, Serialize};

pub use baseline::{baseline_measure, BaselineKind};
pub use map::{
    mean_stability_map, stability_map, unit_base_values, Measure, StabilityMap, TargetFamily,
    UnitValue,
};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_solve, compact_svd, dot, norm, Matrix, RANGE_TOLERANCE};
use crate::zoo::{ClassDistribution, ScoreMatrix};

/// p×p metric tensor of the perturbation manifold at ω₀.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTensor {
    pub g: Matrix,
}

impl MetricTensor {
    pub fn dim(&self) -> usize {
        self.g.rows()
    }
}

fn check_shapes(scores: &ScoreMatrix, probs: &ClassDistribution) -> Result<()> {
    if scores.classes() != probs.len() {
        return Err(invalid(format!(
            "score matrix has {} classes, distribution {}",
            scores.classes(),
            probs.len()
        )));
    }
    Ok(())
}

/// B₀ with columns √P(y)·s_y.
pub fn weighted_scores(scores: &ScoreMatrix, probs: &ClassDistribution) -> Result<Matrix> {
    check_shapes(scores, probs)?;
    let s = scores.matrix();
    let roots: Vec<f64> = probs.probs().iter().map(|p| p.sqrt()).collect();
    Ok(Matrix::from_fn(s.rows(), s.cols(), |i, y| {
        s[(i, y)] * roots[y]
    }))
}

pub fn metric_tensor(scores: &ScoreMatrix, probs: &ClassDistribution) -> Result<MetricTensor> {
    let b = weighted_scores(scores, probs)?;
    let mut g = b.matmul_t(&b);
    // exact symmetry regardless of summation order
    let p = g.rows();
    for i in 0..p {
        for j in 0..i {
            let m = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = m;
            g[(j, i)] = m;
        }
    }
    Ok(MetricTensor { g })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FiPath {
    Inverse,
    Csvd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiResult {
    pub value: f64,
    pub rank: usize,
    pub path: FiPath,
    pub gradient_norm: f64,
}

/// FI of the objective with gradient `grad` under the metric built from
/// `scores` and `probs`.
///
/// p = 1 divides by the scalar metric, p ≤ 3 always takes the cSVD path,
/// and larger p inverts G by Cholesky when it has full rank.
pub fn fi_value(grad: &[f64], scores: &ScoreMatrix, probs: &ClassDistribution) -> Result<FiResult> {
    check_shapes(scores, probs)?;
    let p = scores.dim();
    if grad.len() != p {
        return Err(invalid(format!(
            "gradient has {} entries, scores {p}",
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(invalid("non-finite gradient"));
    }
    let gradient_norm = norm(grad);
    if p == 1 {
        let g = metric_tensor(scores, probs)?.g[(0, 0)];
        let rank = usize::from(g > 0.0);
        let value = if gradient_norm == 0.0 {
            0.0
        } else if g > 0.0 {
            grad[0] * grad[0] / g
        } else {
            return Err(Error::OutOfRange { residual: 1.0 });
        };
        return Ok(FiResult {
            value,
            rank,
            path: FiPath::Inverse,
            gradient_norm,
        });
    }
    let b = weighted_scores(scores, probs)?;
    let svd = compact_svd(&b)?;
    let rank = svd.rank();
    if gradient_norm == 0.0 {
        let path = if rank == p && p > 3 {
            FiPath::Inverse
        } else {
            FiPath::Csvd
        };
        return Ok(FiResult {
            value: 0.0,
            rank,
            path,
            gradient_norm,
        });
    }
    let coeffs = svd.left.t_matvec(grad);
    let projected = svd.left.matvec(&coeffs);
    let residual: Vec<f64> = grad.iter().zip(&projected).map(|(a, b)| a - b).collect();
    let rel = norm(&residual) / gradient_norm;
    if rel > RANGE_TOLERANCE {
        return Err(Error::OutOfRange { residual: rel });
    }
    if p > 3 && rank == p {
        let g = metric_tensor(scores, probs)?;
        if let Ok(x) = cholesky_solve(&g.g, grad) {
            return Ok(FiResult {
                value: dot(grad, &x),
                rank,
                path: FiPath::Inverse,
                gradient_norm,
            });
        }
    }
    let value = coeffs
        .iter()
        .zip(&svd.singular)
        .map(|(c, s)| (c / s) * (c / s))
        .sum();
    Ok(FiResult {
        value,
        rank,
        path: FiPath::Csvd,
        gradient_norm,
    })
}

/// FI through the pseudo-inverse path regardless of p or rank.
pub fn fi_value_csvd(grad: &[f64], scores: &ScoreMatrix, probs: &ClassDistribution) -> Result<f64> {
    let b = weighted_scores(scores, probs)?;
    if grad.len() != b.rows() {
        return Err(invalid("gradient and scores disagree in dimension"));
    }
    let svd = compact_svd(&b)?;
    let coeffs = svd.left.t_matvec(grad);
    Ok(coeffs
        .iter()
        .zip(&svd.singular)
        .map(|(c, s)| (c / s) * (c / s))
        .sum())
}

/// FI through the explicit inverse of a full-rank metric.
pub fn fi_value_inverse(
    grad: &[f64],
    scores: &ScoreMatrix,
    probs: &ClassDistribution,
) -> Result<f64> {
    let g = metric_tensor(scores, probs)?;
    let x = cholesky_solve(&g.g, grad)?;
    Ok(dot(grad, &x))
}

/// FI for f = −log P(y_pred): the gradient is the negated score column.
pub fn fi_for_prediction(
    scores: &ScoreMatrix,
    probs: &ClassDistribution,
    y_pred: usize,
) -> Result<FiResult> {
    if y_pred >= scores.classes() {
        return Err(invalid(format!(
            "class {y_pred} outside 0..{}",
            scores.classes()
        )));
    }
    let grad: Vec<f64> = scores.column(y_pred).into_iter().map(|v| -v).collect();
    fi_value(&grad, scores, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(q: f64) -> (ScoreMatrix, ClassDistribution) {
        // additive perturbation of the first logit
        let probs = ClassDistribution::from_probs(vec![q, 1.0 - q]);
        let scores = ScoreMatrix::from_columns(&[vec![1.0 - q], vec![-q]]).unwrap();
        (scores, probs)
    }

    #[test]
    fn metric_hand_value() {
        let (s, p) = binary(0.5);
        let g = metric_tensor(&s, &p).unwrap();
        assert!((g.g[(0, 0)] - 0.25).abs() < 1e-15);
        let zero = ScoreMatrix::from_columns(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(metric_tensor(&zero, &p).unwrap().g, Matrix::zeros(2, 2));
    }

    #[test]
    fn binary_softmax_values() {
        for (q, expect) in [(0.5, 1.0), (0.9, 1.0 / 9.0)] {
            let (s, p) = binary(q);
            let r = fi_for_prediction(&s, &p, 0).unwrap();
            assert!((r.value - expect).abs() < 1e-12, "q={q}: {}", r.value);
            assert_eq!(r.rank, 1);
        }
    }

    #[test]
    fn rank_deficient_two_dim() {
        let p = ClassDistribution::from_probs(vec![0.5, 0.5]);
        let s = ScoreMatrix::from_columns(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let r = fi_value(&[-1.0, 0.0], &s, &p).unwrap();
        assert_eq!(r.rank, 1);
        assert_eq!(r.path, FiPath::Csvd);
        assert!((r.value - 1.0).abs() < 1e-12);
        assert!(matches!(
            fi_value(&[0.0, 1.0], &s, &p),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn dead_unit_is_zero() {
        let p = ClassDistribution::from_probs(vec![0.2, 0.3, 0.5]);
        for dim in [1, 2, 5] {
            let s = ScoreMatrix::from_columns(&vec![vec![0.0; dim]; 3]).unwrap();
            let r = fi_value(&vec![0.0; dim], &s, &p).unwrap();
            assert_eq!(r.value, 0.0);
            assert_eq!(r.rank, 0);
        }
    }

    #[test]
    fn large_p_uses_inverse_when_full_rank() {
        let probs = ClassDistribution::from_probs(vec![0.1, 0.2, 0.3, 0.15, 0.15, 0.1]);
        let raw: Vec<Vec<f64>> = (0..6)
            .map(|y| {
                (0..4)
                    .map(|i| (((i * 6 + y) * (i * 6 + y)) as f64).sin())
                    .collect()
            })
            .collect();
        // centre so that Σ P s = 0
        let mean: Vec<f64> = (0..4)
            .map(|i| raw.iter().zip(probs.probs()).map(|(c, p)| p * c[i]).sum())
            .collect();
        let cols: Vec<Vec<f64>> = raw
            .iter()
            .map(|c| c.iter().zip(&mean).map(|(a, m)| a - m).collect())
            .collect();
        let s = ScoreMatrix::from_columns(&cols).unwrap();
        let r = fi_for_prediction(&s, &probs, 2).unwrap();
        assert_eq!(r.path, FiPath::Inverse);
        let grad: Vec<f64> = s.column(2).iter().map(|v| -v).collect();
        let alt = fi_value_csvd(&grad, &s, &probs).unwrap();
        assert!((r.value - alt).abs() <= 1e-8 * r.value);
    }

    #[test]
    fn shape_mismatch() {
        let (s, _) = binary(0.5);
        let p3 = ClassDistribution::from_probs(vec![0.2, 0.3, 0.5]);
        assert!(fi_value(&[1.0], &s, &p3).is_err());
        let p2 = ClassDistribution::from_probs(vec![0.5, 0.5]);
        assert!(fi_value(&[1.0, 2.0], &s, &p2).is_err());
    }
}
