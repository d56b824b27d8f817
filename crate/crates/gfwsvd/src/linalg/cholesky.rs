//! Cholesky factorization with a deterministic jitter ladder and the
//! triangular solves that realize every inverse application in the crate.

use super::{max_abs, LinalgError};
use crate::Tensor;

/// Relative tolerance for the symmetry precondition.
const SYM_TOL: f64 = 1e-10;

/// Jitter ladder multipliers, applied as `alpha * mean(diag) * I`, first
/// success wins.
const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterPolicy {
    /// Fail unless the matrix factors without perturbation.
    Off,
    /// Walk the jitter ladder until a factorization succeeds.
    Ladder,
}

/// Lower-triangular factor together with the diagonal shift that was
/// actually applied, so `l lᵀ = m + jitter * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub l: Tensor,
    pub jitter: f64,
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub fn cholesky_spd(m: &Tensor, policy: JitterPolicy) -> Result<CholeskyFactor, LinalgError> {
    let (rows, cols) = m.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let scale = max_abs(m).max(1.0);
    let mut max_asym = 0.0f64;
    for i in 0..rows {
        for j in (i + 1)..rows {
            max_asym = max_asym.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    if max_asym > SYM_TOL * scale {
        return Err(LinalgError::NotSymmetric { max_asym });
    }

    let mean_diag = if rows == 0 {
        0.0
    } else {
        (0..rows).map(|i| m[[i, i]]).sum::<f64>() / rows as f64
    };
    let steps: &[f64] = match policy {
        JitterPolicy::Off => &JITTER_LADDER[..1],
        JitterPolicy::Ladder => &JITTER_LADDER,
    };
    let mut last = LinalgError::NotPositiveDefinite {
        index: 0,
        pivot: 0.0,
        jitter: 0.0,
    };
    for &alpha in steps {
        let jitter = alpha * mean_diag;
        match factor(m, jitter) {
            Ok(l) => return Ok(CholeskyFactor { l, jitter }),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn factor(m: &Tensor, jitter: f64) -> Result<Tensor, LinalgError> {
    let n = m.nrows();
    // Relative pivot floor: a numerically singular matrix leaves pivots at
    // roundoff scale, which must not pass as positive definite.
    let max_diag = (0..n).fold(0.0f64, |acc, i| acc.max((m[[i, i]] + jitter).abs()));
    let pivot_floor = n as f64 * f64::EPSILON * max_diag;
    let mut l = Tensor::zeros((n, n));
    for j in 0..n {
        let mut d = m[[j, j]] + jitter;
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d.is_nan() || d <= pivot_floor {
            return Err(LinalgError::NotPositiveDefinite {
                index: j,
                pivot: d,
                jitter,
            });
        }
        l[[j, j]] = d.sqrt();
        for i in (j + 1)..n {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / l[[j, j]];
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Solve `T X = rhs`.
    Left,
    /// Solve `X T = rhs`.
    Right,
}

/// Solve a triangular system against the lower-triangular `l`, or against
/// `lᵀ` when `transpose` is set. Only the lower triangle of `l` is read.
pub fn solve_triangular(
    l: &Tensor,
    rhs: &Tensor,
    side: Side,
    transpose: bool,
) -> Result<Tensor, LinalgError> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: l.ncols(),
        });
    }
    for i in 0..n {
        if l[[i, i]] == 0.0 {
            return Err(LinalgError::SingularTriangular { index: i });
        }
    }
    let (rr, rc) = rhs.dim();
    match side {
        Side::Left if rr != n => {
            return Err(LinalgError::DimMismatch(format!(
                "left solve: {n}x{n} factor against {rr}x{rc} rhs"
            )))
        }
        Side::Right if rc != n => {
            return Err(LinalgError::DimMismatch(format!(
                "right solve: {rr}x{rc} rhs against {n}x{n} factor"
            )))
        }
        _ => {}
    }

    let mut x = rhs.clone();
    match (side, transpose) {
        // L X = rhs: forward substitution down each column.
        (Side::Left, false) => {
            for col in 0..rc {
                for i in 0..n {
                    let mut s = x[[i, col]];
                    for j in 0..i {
                        s -= l[[i, j]] * x[[j, col]];
                    }
                    x[[i, col]] = s / l[[i, i]];
                }
            }
        }
        // Lᵀ X = rhs: back substitution.
        (Side::Left, true) => {
            for col in 0..rc {
                for i in (0..n).rev() {
                    let mut s = x[[i, col]];
                    for j in (i + 1)..n {
                        s -= l[[j, i]] * x[[j, col]];
                    }
                    x[[i, col]] = s / l[[i, i]];
                }
            }
        }
        // X L = rhs: columns resolve from last to first.
        (Side::Right, false) => {
            for row in 0..rr {
                for c in (0..n).rev() {
                    let mut s = x[[row, c]];
                    for j in (c + 1)..n {
                        s -= x[[row, j]] * l[[j, c]];
                    }
                    x[[row, c]] = s / l[[c, c]];
                }
            }
        }
        // X Lᵀ = rhs: columns resolve from first to last.
        (Side::Right, true) => {
            for row in 0..rr {
                for c in 0..n {
                    let mut s = x[[row, c]];
                    for j in 0..c {
                        s -= x[[row, j]] * l[[c, j]];
                    }
                    x[[row, c]] = s / l[[c, c]];
                }
            }
        }
    }
    Ok(x)
}
