use super::{dot, Matrix};
use crate::error::{invalid, Result};

const MAX_SWEEPS: usize = 80;
const ORTHO_EPS: f64 = 1e-15;

/// Thin factorisation `M = left · diag(singular) · right` keeping only the
/// numerically nonzero singular values.
#[derive(Debug, Clone)]
pub struct CompactSvd {
    /// rows × r, orthonormal columns.
    pub left: Matrix,
    /// r values, strictly descending above the rank tolerance.
    pub singular: Vec<f64>,
    /// r × cols, orthonormal rows.
    pub right: Matrix,
}

impl CompactSvd {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.left.rows(), self.rank(), |i, j| {
            self.left[(i, j)] * self.singular[j]
        });
        scaled.matmul(&self.right)
    }
}

/// Numerical-rank cutoff `max(rows, cols) · σ_max · 1e-12`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * 1e-12
}

/// Compact SVD by one-sided (Hestenes) Jacobi rotations.
pub fn compact_svd(m: &Matrix) -> Result<CompactSvd> {
    if !m.is_finite() {
        return Err(invalid("compact_svd: non-finite entry"));
    }
    let (rows, cols) = m.shape();
    // Orthogonalise the columns of a tall matrix; a wide input is transposed.
    let transposed = rows < cols;
    let a = if transposed { m.transpose() } else { m.clone() };
    let (tall, n) = a.shape();

    let mut columns: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut rotations: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&columns[p], &columns[p]);
                let beta = dot(&columns[q], &columns[q]);
                let gamma = dot(&columns[p], &columns[q]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut columns, p, q, c, s);
                rotate(&mut rotations, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dot(c, c).sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let tol = rank_tolerance(rows, cols, sigma_max);
    let kept: Vec<(usize, f64)> = order.into_iter().filter(|(_, s)| *s > tol).collect();
    let r = kept.len();

    // Left vectors of the tall factor, re-orthogonalised (modified Gram–Schmidt)
    // so that small retained singular values do not spoil orthonormality.
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(r);
    for (j, sigma) in &kept {
        let mut v: Vec<f64> = columns[*j].iter().map(|x| x / sigma).collect();
        for prev in &u {
            let proj = dot(prev, &v);
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= proj * pi;
            }
        }
        let nv = dot(&v, &v).sqrt();
        for vi in &mut v {
            *vi /= nv;
        }
        u.push(v);
    }
    let singular: Vec<f64> = kept.iter().map(|k| k.1).collect();

    let tall_left = Matrix::from_fn(tall, r, |i, k| u[k][i]);
    let tall_right = Matrix::from_fn(r, n, |k, i| rotations[kept[k].0][i]);
    let (left, right) = if transposed {
        // mᵀ = U Σ Vᵀ  ⇒  m = V Σ Uᵀ
        (tall_right.transpose(), tall_left.transpose())
    } else {
        (tall_left, tall_right)
    };
    Ok(CompactSvd {
        left,
        singular,
        right,
    })
}

fn rotate(vectors: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = vectors.split_at_mut(q);
    let vp = &mut head[p];
    let vq = &mut tail[0];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}
