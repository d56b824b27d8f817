//! Dense and matrix-free linear algebra under one fixed convention.
//!
//! `vec` is column-stacking: entry `(i, j)` of a matrix with `rows` rows
//! maps to index `i + j * rows`. Under that convention the Kronecker
//! identity reads `(A ⊗ B) vec(X) = vec(B X Aᵀ)`, and every formula in the
//! crate is stated against it.

mod cholesky;
mod lanczos;
mod svd;

pub use cholesky::{cholesky_spd, solve_triangular, CholeskyFactor, JitterPolicy, Side};
pub use lanczos::{truncated_svd, LanczosOptions, TruncatedSvd};
pub use svd::full_svd;

use ndarray::Array1;
use thiserror::Error;

use crate::Tensor;

/// Hard cap on materialized Kronecker products (desk scale only).
pub const KRON_ENTRY_CAP: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },
    #[error(
        "matrix is not positive definite (pivot {pivot:e} at index {index}, jitter {jitter:e})"
    )]
    NotPositiveDefinite {
        index: usize,
        pivot: f64,
        jitter: f64,
    },
    #[error("triangular factor has a zero diagonal entry at index {index}")]
    SingularTriangular { index: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("kronecker product would have {entries} entries, cap is {cap}")]
    KronTooLarge { entries: usize, cap: usize },
    #[error("requested rank {k} out of range for a {out_dim}x{in_dim} operator")]
    RankOutOfRange {
        k: usize,
        out_dim: usize,
        in_dim: usize,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
}

/// A linear map exposed only through matrix-vector products.
///
/// Implementations must keep `apply` and `apply_transpose` adjoint to each
/// other: `⟨apply(x), y⟩ = ⟨x, apply_transpose(y)⟩` for all `x`, `y`.
pub trait LinearOperator {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// `y = A x` with `x` of length `in_dim`; returns length `out_dim`.
    fn apply(&self, x: &Array1<f64>) -> Array1<f64>;
    /// `x = Aᵀ y` with `y` of length `out_dim`; returns length `in_dim`.
    fn apply_transpose(&self, y: &Array1<f64>) -> Array1<f64>;
}

/// Dense matrix viewed as an operator; the reference for matrix-free paths.
pub struct DenseOperator<'a> {
    matrix: &'a Tensor,
}

impl<'a> DenseOperator<'a> {
    pub fn new(matrix: &'a Tensor) -> Self {
        Self { matrix }
    }
}

impl LinearOperator for DenseOperator<'_> {
    fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        self.matrix.dot(x)
    }

    fn apply_transpose(&self, y: &Array1<f64>) -> Array1<f64> {
        self.matrix.t().dot(y)
    }
}

/// Singular triplet with orthonormal factors.
///
/// `u` is `out_dim x k`, `v` is `in_dim x k`, and `s` is nonincreasing and
/// nonnegative. Sign convention: in each column of `u` the entry of largest
/// magnitude is positive, ties broken by the lowest index; `v` columns are
/// flipped together with their `u` partner.
#[derive(Debug, Clone)]
pub struct SvdTriplet {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdTriplet {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let mut us = self.u.clone();
        for (j, col) in us.columns_mut().into_iter().enumerate() {
            let mut col = col;
            col *= self.s[j];
        }
        us.dot(&self.v.t())
    }

    pub(crate) fn enforce_sign_convention(&mut self) {
        for j in 0..self.s.len() {
            let mut best = 0usize;
            let mut best_abs = f64::NEG_INFINITY;
            for i in 0..self.u.nrows() {
                let a = self.u[[i, j]].abs();
                if a > best_abs {
                    best_abs = a;
                    best = i;
                }
            }
            if self.u[[best, j]] < 0.0 {
                for i in 0..self.u.nrows() {
                    self.u[[i, j]] = -self.u[[i, j]];
                }
                for i in 0..self.v.nrows() {
                    self.v[[i, j]] = -self.v[[i, j]];
                }
            }
        }
    }

    pub(crate) fn sort_descending(&mut self) {
        let k = self.s.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| self.s[b].partial_cmp(&self.s[a]).unwrap());
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return;
        }
        let mut u = Tensor::zeros((self.u.nrows(), k));
        let mut v = Tensor::zeros((self.v.nrows(), k));
        let mut s = Vec::with_capacity(k);
        for (dst, &src) in order.iter().enumerate() {
            u.column_mut(dst).assign(&self.u.column(src));
            v.column_mut(dst).assign(&self.v.column(src));
            s.push(self.s[src]);
        }
        self.u = u;
        self.v = v;
        self.s = s;
    }
}

/// Standard Kronecker product: block `(i, j)` of the result is
/// `a[i, j] * b`.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    let (p, q) = a.dim();
    let (r, s) = b.dim();
    let entries = p
        .checked_mul(r)
        .and_then(|rows| q.checked_mul(s).and_then(|cols| rows.checked_mul(cols)))
        .ok_or(LinalgError::KronTooLarge {
            entries: usize::MAX,
            cap: KRON_ENTRY_CAP,
        })?;
    if entries > KRON_ENTRY_CAP {
        return Err(LinalgError::KronTooLarge {
            entries,
            cap: KRON_ENTRY_CAP,
        });
    }
    let mut out = Tensor::zeros((p * r, q * s));
    for ia in 0..p {
        for ja in 0..q {
            let scale = a[[ia, ja]];
            for ib in 0..r {
                for jb in 0..s {
                    out[[ia * r + ib, ja * s + jb]] = scale * b[[ib, jb]];
                }
            }
        }
    }
    Ok(out)
}

/// Column-stacking vectorization: entry `(i, j)` goes to index
/// `i + j * rows`.
pub fn vec(m: &Tensor) -> Array1<f64> {
    let (rows, cols) = m.dim();
    let mut out = Array1::zeros(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            out[i + j * rows] = m[[i, j]];
        }
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec(x: &Array1<f64>, rows: usize, cols: usize) -> Result<Tensor, LinalgError> {
    if x.len() != rows * cols {
        return Err(LinalgError::DimMismatch(format!(
            "unvec of length {} into {}x{}",
            x.len(),
            rows,
            cols
        )));
    }
    let mut m = Tensor::zeros((rows, cols));
    for j in 0..cols {
        for i in 0..rows {
            m[[i, j]] = x[i + j * rows];
        }
    }
    Ok(m)
}

pub fn fro_norm(m: &Tensor) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn max_abs(m: &Tensor) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}
