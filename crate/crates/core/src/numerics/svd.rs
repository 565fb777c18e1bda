//! One-sided Jacobi SVD and adaptive-ratio truncation.
//!
//! The Hestenes variant orthogonalises the columns of a working copy of `A`
//! by plane rotations, accumulating the same rotations into `V`. When every
//! column pair is orthogonal to within [`TOLERANCE`] (relative to the pair's
//! norms) the column norms are the singular values and the normalised columns
//! are the left singular vectors.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

/// Sweep cap before giving up.
pub const MAX_SWEEPS: usize = 60;

/// Convergence threshold on `|aₚ·a_q| / (‖aₚ‖‖a_q‖)`.
pub const TOLERANCE: f64 = 1e-12;

/// Thin SVD `A = U·diag(S)·Vᵀ` with `r = min(rows, cols)` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    /// `rows × r`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `cols × r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keep the first `k` singular triplets.
    pub fn leading(&self, k: usize) -> SvdFactors {
        let idx: Vec<usize> = (0..k).collect();
        SvdFactors {
            u: self.u.select_columns(&idx),
            s: self.s[..k].to_vec(),
            v: self.v.select_columns(&idx),
        }
    }

    /// `U·diag(S)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, r) = self.u.shape();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for k in 0..r {
            let sk = self.s[k];
            if sk == 0.0 {
                continue;
            }
            for i in 0..m {
                let a = self.u.get(i, k) * sk;
                if a == 0.0 {
                    continue;
                }
                let row = out.row_mut(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o += a * self.v.get(j, k);
                }
            }
        }
        out
    }
}

/// Full (thin) singular value decomposition by one-sided Jacobi.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if a.is_empty() {
        return Err(Error::shape("svd", "empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let f = jacobi_tall(&a.transpose())?;
        Ok(SvdFactors {
            u: f.v,
            s: f.s,
            v: f.u,
        })
    }
}

fn jacobi_tall(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    // column-major working storage
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let scale = a.frobenius_norm();
    let negligible = (f64::EPSILON * scale).powi(2);

    let mut converged = false;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        worst = 0.0_f64;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(ratio);
                if ratio <= TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1.0_f64.hypot(zeta));
                let c = 1.0 / 1.0_f64.hypot(t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if worst <= TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: worst,
        });
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let cutoff = sigma_max * (m.max(n) as f64) * f64::EPSILON;
    for s in &mut sigma {
        if *s <= cutoff {
            *s = 0.0;
        }
    }

    // Stable order: equal values keep their emergence order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        sigma[j]
            .partial_cmp(&sigma[i])
            .expect("finite singular values")
    });

    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| (sigma[j] > 0.0).then(|| cols[j].iter().map(|x| x / sigma[j]).collect()))
        .collect();
    complete_orthonormal(&mut ucols, m);

    let u = Matrix::from_fn(m, n, |i, k| ucols[k].as_ref().expect("completed")[i]);
    let v = Matrix::from_fn(n, n, |i, k| vcols[order[k]][i]);
    let s = order.iter().map(|&j| sigma[j]).collect();
    Ok(SvdFactors { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the `None` slots with unit vectors orthogonal to every other slot,
/// drawn from the standard basis by Gram–Schmidt.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut basis = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while basis < dim {
            let mut cand = vec![0.0; dim];
            cand[basis] = 1.0;
            basis += 1;
            // two passes of classical Gram–Schmidt
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                cand.iter_mut().for_each(|c| *c /= norm);
                cols[slot] = Some(cand);
                break;
            }
        }
    }
}

/// Result of [`truncate_svd`].
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSvd {
    pub factors: SvdFactors,
    /// Number of retained triplets, always ≥ 1.
    pub rank: usize,
    /// Set when every singular value was zero and the single kept triplet
    /// carries no mass.
    pub degenerate: bool,
}

/// Smallest `K ≥ 1` whose leading singular mass reaches `lambda` of the
/// total. Returns `(K, degenerate)`; `degenerate` marks an all-zero spectrum.
pub fn retained_rank(s: &[f64], lambda: f64) -> (usize, bool) {
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return (1, true);
    }
    let target = lambda * total;
    let mut cum = 0.0;
    for (k, &v) in s.iter().enumerate() {
        cum += v;
        if cum >= target {
            return (k + 1, false);
        }
    }
    (s.len(), false)
}

/// Keep the smallest prefix of singular triplets holding at least `lambda`
/// of the singular-value mass.
pub fn truncate_svd(f: &SvdFactors, lambda: f64) -> Result<TruncatedSvd> {
    check_lambda(lambda)?;
    let (rank, degenerate) = retained_rank(&f.s, lambda);
    Ok(TruncatedSvd {
        factors: f.leading(rank),
        rank,
        degenerate,
    })
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Argument(format!(
            "svd ratio {lambda} outside (0, 1]"
        )));
    }
    Ok(())
}
