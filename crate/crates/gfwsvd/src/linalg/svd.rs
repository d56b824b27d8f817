//! Dense thin SVD via one-sided Jacobi (Hestenes) rotations.
//!
//! Columns of the working matrix are rotated pairwise until they are
//! mutually orthogonal; their norms are then the singular values and the
//! accumulated rotations form V. The method is slower than bidiagonalization
//! at scale but keeps full accuracy on rank-deficient inputs, which the
//! compression paths hit routinely (softmax gradients have a zero column
//! sum, so trained weights lose a singular value).

use super::{LinalgError, SvdTriplet};
use crate::Tensor;

/// Pairwise orthogonality threshold: a rotation is skipped when
/// `|⟨b_i, b_j⟩| ≤ eps · ‖b_i‖ ‖b_j‖`.
const JACOBI_EPS: f64 = 1e-14;
const MAX_SWEEPS: usize = 60;

/// Thin SVD of a dense matrix: `m = U diag(S) Vᵀ` with `k = min(rows, cols)`
/// columns, singular values sorted nonincreasing, and the crate sign
/// convention applied.
pub fn full_svd(m: &Tensor) -> Result<SvdTriplet, LinalgError> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite {
            context: "full_svd input",
        });
    }
    let (rows, cols) = m.dim();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SvdTriplet {
            u: Tensor::zeros((rows, 0)),
            s: Vec::new(),
            v: Tensor::zeros((cols, 0)),
        });
    }

    // Work tall: r >= c keeps the rotation count at min(rows, cols)².
    let transposed = rows < cols;
    let mut b = if transposed {
        m.t().to_owned()
    } else {
        m.clone()
    };
    let (r, c) = b.dim();
    let mut v = Tensor::eye(c);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..c {
            for j in (i + 1)..c {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for l in 0..r {
                    let bi = b[[l, i]];
                    let bj = b[[l, j]];
                    alpha += bi * bi;
                    beta += bj * bj;
                    gamma += bi * bj;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for l in 0..r {
                    let bi = b[[l, i]];
                    let bj = b[[l, j]];
                    b[[l, i]] = cs * bi - sn * bj;
                    b[[l, j]] = sn * bi + cs * bj;
                }
                for l in 0..c {
                    let vi = v[[l, i]];
                    let vj = v[[l, j]];
                    v[[l, i]] = cs * vi - sn * vj;
                    v[[l, j]] = sn * vi + cs * vj;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut norms: Vec<f64> = (0..c)
        .map(|i| (0..r).map(|l| b[[l, i]] * b[[l, i]]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &bb| norms[bb].partial_cmp(&norms[a]).unwrap());

    let sigma_max = norms[order[0]];
    let tiny = sigma_max * f64::EPSILON * (r.max(c) as f64);
    let mut u_cols = Tensor::zeros((r, c));
    let mut v_cols = Tensor::zeros((c, c));
    let mut s = Vec::with_capacity(c);
    for (dst, &src) in order.iter().enumerate() {
        s.push(norms[src]);
        for l in 0..c {
            v_cols[[l, dst]] = v[[l, src]];
        }
        if norms[src] > tiny && norms[src] > 0.0 {
            for l in 0..r {
                u_cols[[l, dst]] = b[[l, src]] / norms[src];
            }
        } else {
            complete_column(&mut u_cols, dst);
            norms[src] = norms[src].max(0.0);
        }
    }

    let (u, v) = if transposed {
        (v_cols, u_cols)
    } else {
        (u_cols, v_cols)
    };
    // Thin factors: keep the k leading columns.
    let mut triplet = SvdTriplet {
        u: u.slice(ndarray::s![.., ..k]).to_owned(),
        s: s[..k].to_vec(),
        v: v.slice(ndarray::s![.., ..k]).to_owned(),
    };
    triplet.enforce_sign_convention();
    Ok(triplet)
}

/// Fill column `dst` with a unit vector orthogonal to every earlier
/// column, built deterministically from the standard basis.
fn complete_column(u: &mut Tensor, dst: usize) {
    let rows = u.nrows();
    for candidate in 0..rows {
        let mut col = std::vec![0.0; rows];
        col[candidate] = 1.0;
        for j in 0..dst {
            let dot: f64 = (0..rows).map(|l| col[l] * u[[l, j]]).sum();
            for l in 0..rows {
                col[l] -= dot * u[[l, j]];
            }
        }
        let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for l in 0..rows {
                u[[l, dst]] = col[l] / norm;
            }
            return;
        }
    }
    // Unreachable for dst < rows: some basis vector always survives.
    u[[dst.min(rows - 1), dst]] = 1.0;
}
