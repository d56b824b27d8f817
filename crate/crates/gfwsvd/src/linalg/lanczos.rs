//! Operator-based truncated SVD via Golub–Kahan–Lanczos bidiagonalization
//! with full reorthogonalization.
//!
//! The operator is touched only through `apply`/`apply_transpose`. The
//! projected matrix is accumulated from the actual reorthogonalization
//! coefficients (in exact arithmetic it is upper bidiagonal), and Ritz
//! triplets are accepted only after an explicit residual check with real
//! matvecs on both sides.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{full_svd, LinalgError, LinearOperator, SvdTriplet};
use crate::Tensor;

/// Relative breakdown threshold for the bidiagonalization recurrence.
const BREAKDOWN_REL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct LanczosOptions {
    /// Number of leading triplets to compute.
    pub rank: usize,
    /// Convergence: every returned triplet must satisfy
    /// `max(‖A v − σ u‖, ‖Aᵀ u − σ v‖) ≤ tol · σ₁`.
    pub tol: f64,
    /// Cap on bidiagonalization steps.
    pub max_iter: usize,
    /// Seed for the deterministic start vector.
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            rank: 1,
            tol: 1e-8,
            max_iter: 200,
            seed: 0,
        }
    }
}

/// Truncated SVD result with convergence diagnostics. A non-converged
/// result is returned as-is with `converged == false`, never silently
/// accepted by callers that care.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub triplet: SvdTriplet,
    /// Bidiagonalization steps taken.
    pub iterations: usize,
    /// Max over returned triplets of the two-sided residual, relative to
    /// the leading singular value (0 when the operator is zero).
    pub residual: f64,
    pub converged: bool,
}

fn norm(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0f64..1.0));
        let n = norm(&v);
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Two passes of classical Gram-Schmidt against `basis`, accumulating the
/// first-pass coefficients plus corrections into `coeffs`.
fn orthogonalize(w: &mut Array1<f64>, basis: &[Array1<f64>], coeffs: &mut Vec<f64>) {
    coeffs.clear();
    coeffs.resize(basis.len(), 0.0);
    for _ in 0..2 {
        for (i, b) in basis.iter().enumerate() {
            let c = b.dot(w);
            if c != 0.0 {
                w.scaled_add(-c, b);
            }
            coeffs[i] += c;
        }
    }
}

/// Draw a random vector orthogonal to `basis`; `None` when the complement
/// is (numerically) empty.
fn random_orthogonal(
    dim: usize,
    basis: &[Array1<f64>],
    rng: &mut ChaCha8Rng,
) -> Option<Array1<f64>> {
    let mut scratch = Vec::new();
    for _ in 0..4 {
        let mut v = random_unit(dim, rng);
        orthogonalize(&mut v, basis, &mut scratch);
        let n = norm(&v);
        if n > 1e-8 {
            return Some(v / n);
        }
    }
    None
}

struct RitzState {
    sigmas: Vec<f64>,
    us: Vec<Array1<f64>>,
    vs: Vec<Array1<f64>>,
    residual: f64,
    converged: bool,
}

/// Leading `opts.rank` singular triplets of an operator.
pub fn truncated_svd(
    op: &dyn LinearOperator,
    opts: &LanczosOptions,
) -> Result<TruncatedSvd, LinalgError> {
    let nin = op.in_dim();
    let nout = op.out_dim();
    let k = opts.rank;
    if k == 0 || k > nin.min(nout) {
        return Err(LinalgError::RankOutOfRange {
            k,
            out_dim: nout,
            in_dim: nin,
        });
    }
    let max_steps = opts.max_iter.min(nin).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis_v: Vec<Array1<f64>> = std::vec![random_unit(nin, &mut rng)];
    let mut basis_u: Vec<Array1<f64>> = Vec::new();
    // proj_cols[j] holds Uᵀ (op v_j); the projected matrix entries.
    let mut proj_cols: Vec<Vec<f64>> = Vec::new();
    let mut coeffs = Vec::new();
    let mut scale = 0.0f64;
    let mut ritz: Option<RitzState> = None;

    while proj_cols.len() < max_steps {
        let j = proj_cols.len();
        // u-step: expand the output basis with op v_j.
        let mut p = op.apply(&basis_v[j]);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite {
                context: "operator apply",
            });
        }
        orthogonalize(&mut p, &basis_u, &mut coeffs);
        let alpha = norm(&p);
        scale = scale.max(alpha);
        let mut col = coeffs.clone();
        if alpha > BREAKDOWN_REL * scale && alpha > 0.0 {
            basis_u.push(&p / alpha);
            col.push(alpha);
        }
        proj_cols.push(col);

        // v-step: expand the input basis with opᵀ u_last, falling back to a
        // random direction when the recurrence has exhausted its branch.
        if basis_v.len() == proj_cols.len() && basis_v.len() < nin {
            let mut pushed = false;
            if let Some(u_last) = basis_u.last() {
                let mut r = op.apply_transpose(u_last);
                if r.iter().any(|x| !x.is_finite()) {
                    return Err(LinalgError::NonFinite {
                        context: "operator apply_transpose",
                    });
                }
                orthogonalize(&mut r, &basis_v, &mut coeffs);
                let beta = norm(&r);
                scale = scale.max(beta);
                if beta > BREAKDOWN_REL * scale && beta > 0.0 {
                    basis_v.push(&r / beta);
                    pushed = true;
                }
            }
            if !pushed {
                if let Some(v) = random_orthogonal(nin, &basis_v, &mut rng) {
                    basis_v.push(v);
                }
            }
        }

        // Ritz extraction and explicit convergence check.
        if basis_u.len().min(proj_cols.len()) >= k {
            let state = ritz_triplets(op, &basis_u, &basis_v, &proj_cols, k, opts.tol)?;
            let done = state.converged;
            ritz = Some(state);
            if done {
                break;
            }
        }

        // Nothing left to process: the input space is exhausted.
        if basis_v.len() == proj_cols.len() {
            break;
        }
        // A zero operator annihilates every probe; stop early.
        if basis_u.is_empty() && proj_cols.len() >= 3 {
            break;
        }
    }

    let iterations = proj_cols.len();
    // When the subspace exhausted below rank k, extract what it does hold
    // and pad the rest with zero triplets below.
    let k_eff = k.min(basis_u.len()).min(proj_cols.len());
    let (mut sigmas, mut us, mut vs, mut residual, converged_core) = if k_eff == 0 {
        (Vec::new(), Vec::new(), Vec::new(), 0.0, true)
    } else {
        let state = match ritz {
            Some(state) if state.sigmas.len() == k_eff => state,
            _ => ritz_triplets(op, &basis_u, &basis_v, &proj_cols, k_eff, opts.tol)?,
        };
        (
            state.sigmas,
            state.us,
            state.vs,
            state.residual,
            state.converged,
        )
    };

    // Pad rank-deficient results with zero triplets on orthonormal
    // complements, measuring their residuals honestly.
    let sigma1 = sigmas.first().copied().unwrap_or(0.0);
    let mut pad_ok = true;
    while sigmas.len() < k {
        let u = random_orthogonal(nout, &us, &mut rng).ok_or(LinalgError::RankOutOfRange {
            k,
            out_dim: nout,
            in_dim: nin,
        })?;
        let v = random_orthogonal(nin, &vs, &mut rng).ok_or(LinalgError::RankOutOfRange {
            k,
            out_dim: nout,
            in_dim: nin,
        })?;
        let r = norm(&op.apply(&v)).max(norm(&op.apply_transpose(&u)));
        let rel = if sigma1 > 0.0 { r / sigma1 } else { r };
        residual = residual.max(rel);
        pad_ok &= rel <= opts.tol.max(1e-12);
        sigmas.push(0.0);
        us.push(u);
        vs.push(v);
    }

    let mut u = Tensor::zeros((nout, k));
    let mut v = Tensor::zeros((nin, k));
    for (idx, (uc, vc)) in us.iter().zip(vs.iter()).enumerate() {
        for i in 0..nout {
            u[[i, idx]] = uc[i];
        }
        for i in 0..nin {
            v[[i, idx]] = vc[i];
        }
    }
    let mut triplet = SvdTriplet { u, s: sigmas, v };
    triplet.sort_descending();
    triplet.enforce_sign_convention();

    Ok(TruncatedSvd {
        triplet,
        iterations,
        residual,
        converged: converged_core && pad_ok,
    })
}

fn ritz_triplets(
    op: &dyn LinearOperator,
    basis_u: &[Array1<f64>],
    basis_v: &[Array1<f64>],
    proj_cols: &[Vec<f64>],
    k: usize,
    tol: f64,
) -> Result<RitzState, LinalgError> {
    let rows = basis_u.len();
    let cols = proj_cols.len();
    let mut m = Tensor::zeros((rows, cols));
    for (j, col) in proj_cols.iter().enumerate() {
        for (i, &c) in col.iter().enumerate() {
            m[[i, j]] = c;
        }
    }
    let small = full_svd(&m)?;

    let mut sigmas = Vec::with_capacity(k);
    let mut us = Vec::with_capacity(k);
    let mut vs = Vec::with_capacity(k);
    let mut worst = 0.0f64;
    let sigma1 = small.s.first().copied().unwrap_or(0.0);
    for t in 0..k {
        let sigma = small.s[t];
        let mut ru = Array1::zeros(basis_u[0].len());
        for (l, b) in basis_u.iter().enumerate() {
            ru.scaled_add(small.u[[l, t]], b);
        }
        let mut rv = Array1::zeros(basis_v[0].len());
        for (l, b) in basis_v.iter().take(cols).enumerate() {
            rv.scaled_add(small.v[[l, t]], b);
        }
        let res_v = norm(&(&op.apply(&rv) - &(&ru * sigma)));
        let res_u = norm(&(&op.apply_transpose(&ru) - &(&rv * sigma)));
        worst = worst.max(res_v.max(res_u));
        sigmas.push(sigma);
        us.push(ru);
        vs.push(rv);
    }
    let converged = worst <= tol * sigma1;
    let residual = if sigma1 > 0.0 { worst / sigma1 } else { worst };
    Ok(RitzState {
        sigmas,
        us,
        vs,
        residual,
        converged,
    })
}
