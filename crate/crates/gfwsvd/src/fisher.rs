//! Empirical Fisher information from per-batch gradients.
//!
//! The Fisher of an `n x m` layer is the `nm x nm` mean of `vec(G) vec(G)ᵀ`
//! over batch gradients `G`. That matrix is never formed at scale: a fixed
//! entry permutation rearranges it into an `m² x n²` matrix whose rank-1
//! approximation gives the nearest Kronecker factors `A ⊗ B`, and the
//! rearranged matrix acts on vectors through per-batch products
//! `Gᵀ Z G` (forward) and `G Z Gᵀ` (transpose), at O(|D|(mn² + m²n)) per
//! matvec instead of O(m²n²).

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    cholesky_spd, truncated_svd, unvec, vec, JitterPolicy, LanczosOptions, LinalgError,
    LinearOperator,
};
use crate::Tensor;

/// Cap on `n * m` for the explicitly materialized Fisher (desk-scale
/// oracle).
pub const EXPLICIT_FIM_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error("gradient batch has dims {got:?}, accumulator expects {expected:?}")]
    DimMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("gradient accumulator holds no batches")]
    Empty,
    #[error("explicit Fisher requires n*m <= {cap}, got {nm}")]
    SizeCap { nm: usize, cap: usize },
    #[error("vector has length {got}, expected {expected}")]
    VectorLength { got: usize, expected: usize },
    #[error("non-finite gradient entry")]
    NonFinite,
    #[error("factor not positive definite after regularization: {0}")]
    Definiteness(#[source] LinalgError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Ordered collection of per-batch mean gradients of one layer.
#[derive(Debug, Clone)]
pub struct GradientAccumulator {
    n: usize,
    m: usize,
    batches: Vec<Tensor>,
}

impl GradientAccumulator {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            batches: Vec::new(),
        }
    }

    pub fn from_batches(batches: Vec<Tensor>) -> Result<Self, FisherError> {
        let first = batches.first().ok_or(FisherError::Empty)?;
        let (n, m) = first.dim();
        let mut acc = Self::new(n, m);
        for b in batches {
            acc.accumulate(b)?;
        }
        Ok(acc)
    }

    /// Append one batch gradient.
    pub fn accumulate(&mut self, g: Tensor) -> Result<(), FisherError> {
        if g.dim() != (self.n, self.m) {
            return Err(FisherError::DimMismatch {
                got: g.dim(),
                expected: (self.n, self.m),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(FisherError::NonFinite);
        }
        self.batches.push(g);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of batches |D|.
    pub fn count(&self) -> usize {
        self.batches.len()
    }

    pub fn batches(&self) -> &[Tensor] {
        &self.batches
    }

    fn require_nonempty(&self) -> Result<(), FisherError> {
        if self.batches.is_empty() {
            Err(FisherError::Empty)
        } else {
            Ok(())
        }
    }
}

/// The full `nm x nm` empirical Fisher, materialized. Desk-scale oracle
/// only; every production path goes through the rearranged operator.
pub fn explicit_fim(acc: &GradientAccumulator) -> Result<Tensor, FisherError> {
    acc.require_nonempty()?;
    let nm = acc.n * acc.m;
    if nm > EXPLICIT_FIM_CAP {
        return Err(FisherError::SizeCap {
            nm,
            cap: EXPLICIT_FIM_CAP,
        });
    }
    let mut fim = Tensor::zeros((nm, nm));
    for g in &acc.batches {
        let v = vec(g);
        for i in 0..nm {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for j in 0..nm {
                fim[[i, j]] += vi * v[j];
            }
        }
    }
    fim /= acc.count() as f64;
    Ok(fim)
}

/// Forward matvec of the rearranged Fisher:
/// `z (len n²) ↦ (1/|D|) Σ vec(Gᵀ Z G)` (len m²).
pub fn rearranged_apply(
    acc: &GradientAccumulator,
    z: &Array1<f64>,
) -> Result<Array1<f64>, FisherError> {
    acc.require_nonempty()?;
    let (n, m) = (acc.n, acc.m);
    if z.len() != n * n {
        return Err(FisherError::VectorLength {
            got: z.len(),
            expected: n * n,
        });
    }
    let z_mat = unvec(z, n, n)?;
    let mut sum = Tensor::zeros((m, m));
    for g in &acc.batches {
        sum += &g.t().dot(&z_mat).dot(g);
    }
    sum /= acc.count() as f64;
    Ok(vec(&sum))
}

/// Transpose matvec of the rearranged Fisher:
/// `z (len m²) ↦ (1/|D|) Σ vec(G Z Gᵀ)` (len n²).
pub fn rearranged_apply_transpose(
    acc: &GradientAccumulator,
    z: &Array1<f64>,
) -> Result<Array1<f64>, FisherError> {
    acc.require_nonempty()?;
    let (n, m) = (acc.n, acc.m);
    if z.len() != m * m {
        return Err(FisherError::VectorLength {
            got: z.len(),
            expected: m * m,
        });
    }
    let z_mat = unvec(z, m, m)?;
    let mut sum = Tensor::zeros((n, n));
    for g in &acc.batches {
        sum += &g.dot(&z_mat).dot(&g.t());
    }
    sum /= acc.count() as f64;
    Ok(vec(&sum))
}

/// The `m² x n²` rearranged Fisher, materialized from [`explicit_fim`] by
/// the entry permutation. Independent of the structured matvec path, so it
/// serves as its oracle.
pub fn rearranged_explicit(acc: &GradientAccumulator) -> Result<Tensor, FisherError> {
    let fim = explicit_fim(acc)?;
    let (n, m) = (acc.n, acc.m);
    let mut r = Tensor::zeros((m * m, n * n));
    for jq in 0..m {
        for jp in 0..m {
            for iq in 0..n {
                for ip in 0..n {
                    r[[jp + jq * m, ip + iq * n]] = fim[[ip + jp * n, iq + jq * n]];
                }
            }
        }
    }
    Ok(r)
}

/// The rearranged Fisher as a matrix-free operator (in: n², out: m²).
pub struct RearrangedFisher<'a> {
    acc: &'a GradientAccumulator,
}

impl<'a> RearrangedFisher<'a> {
    pub fn new(acc: &'a GradientAccumulator) -> Self {
        Self { acc }
    }
}

impl LinearOperator for RearrangedFisher<'_> {
    fn in_dim(&self) -> usize {
        self.acc.n * self.acc.n
    }

    fn out_dim(&self) -> usize {
        self.acc.m * self.acc.m
    }

    fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        rearranged_apply(self.acc, x).expect("operator contract: x has length n²")
    }

    fn apply_transpose(&self, y: &Array1<f64>) -> Array1<f64> {
        rearranged_apply_transpose(self.acc, y).expect("operator contract: y has length m²")
    }
}

/// Solver and regularization record attached to extracted factors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FactorDiagnostics {
    pub iterations: usize,
    /// Two-sided Lanczos residual relative to the leading singular value.
    pub residual: f64,
    pub converged: bool,
    /// Applied multiplicative diagonal regularization (largest of the two
    /// factors; 0 when none was applied or the jitter ladder was used).
    pub alpha: f64,
    /// Additive jitter applied to A / B when the diagonal was nonpositive.
    pub jitter_a: f64,
    pub jitter_b: f64,
    /// Whether both factors pass a jitter-free Cholesky. Always true after
    /// successful regularization; with `alpha = 0` the raw factors are
    /// returned unperturbed and this flag records their definiteness.
    pub definite: bool,
}

/// Symmetric positive definite Kronecker factors of the Fisher:
/// `A` (m x m) weights the column/input side, `B` (n x n) the row/output
/// side. Only the product `A ⊗ B` is determined; the scale split between
/// the factors is arbitrary.
#[derive(Debug, Clone)]
pub struct KroneckerFactors {
    pub a: Tensor,
    pub b: Tensor,
    /// Leading singular value of the rearranged Fisher.
    pub sigma: f64,
    pub diagnostics: FactorDiagnostics,
}

#[derive(Debug, Clone)]
pub struct ExtractionConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Multiplicative diagonal regularization `X ← X + α diag(X)`,
    /// escalated tenfold at most twice until the factor admits a
    /// jitter-free Cholesky.
    pub alpha: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            seed: 0,
            alpha: 1e-2,
        }
    }
}

fn trace(t: &Tensor) -> f64 {
    (0..t.nrows()).map(|i| t[[i, i]]).sum()
}

fn symmetrize(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let n = t.nrows();
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = 0.5 * (t[[i, j]] + t[[j, i]]);
        }
    }
    out
}

enum Applied {
    None,
    Multiplicative(f64),
    Jitter(f64),
}

fn regularize_factor(x: &Tensor, alpha: f64) -> Result<(Tensor, Applied, bool), FisherError> {
    let n = x.nrows();
    if alpha == 0.0 {
        // No regularization requested: hand back the raw factor and let
        // the diagnostics record whether it is definite.
        let definite = cholesky_spd(x, JitterPolicy::Off).is_ok();
        return Ok((x.clone(), Applied::None, definite));
    }
    let min_diag = (0..n).map(|i| x[[i, i]]).fold(f64::INFINITY, f64::min);
    if min_diag <= 0.0 {
        // A nonpositive diagonal cannot be repaired by scaling it; fall
        // back to the additive jitter ladder and report the shift.
        let c = cholesky_spd(x, JitterPolicy::Ladder).map_err(FisherError::Definiteness)?;
        let mut xr = x.clone();
        for i in 0..n {
            xr[[i, i]] += c.jitter;
        }
        return Ok((xr, Applied::Jitter(c.jitter), true));
    }
    let mut last = None;
    let mut prev = f64::NAN;
    for e in 0..3 {
        let a_eff = alpha * 10f64.powi(e);
        if a_eff == prev {
            continue;
        }
        prev = a_eff;
        let mut xr = x.clone();
        for i in 0..n {
            xr[[i, i]] += a_eff * x[[i, i]];
        }
        match cholesky_spd(&xr, JitterPolicy::Off) {
            Ok(_) => return Ok((xr, Applied::Multiplicative(a_eff), true)),
            Err(err) => last = Some(err),
        }
    }
    Err(FisherError::Definiteness(
        last.expect("at least one attempt"),
    ))
}

/// Nearest-Kronecker-product factors of the empirical Fisher via a rank-1
/// truncated SVD of the rearranged operator.
///
/// The leading triplet `(u, σ, v)` reshapes to `A = unvec(√σ u, m, m)` and
/// `B = unvec(√σ v, n, n)`; the factors are then sign-normalized (both
/// flipped if `trace(A) < 0`), symmetrized, and regularized until each
/// admits a jitter-free Cholesky. With `alpha = 0` the raw factors come
/// back unperturbed and `diagnostics.definite` records whether they would
/// factor; compression fails loudly on indefinite factors either way.
pub fn extract_kronecker_factors(
    acc: &GradientAccumulator,
    cfg: &ExtractionConfig,
) -> Result<KroneckerFactors, FisherError> {
    acc.require_nonempty()?;
    let (n, m) = (acc.n, acc.m);
    let op = RearrangedFisher::new(acc);
    let opts = LanczosOptions {
        rank: 1,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        seed: cfg.seed,
    };
    let tsvd = truncated_svd(&op, &opts)?;
    let sigma = tsvd.triplet.s[0];
    let scale = sigma.sqrt();

    let u = tsvd.triplet.u.column(0).to_owned() * scale;
    let v = tsvd.triplet.v.column(0).to_owned() * scale;
    let mut a = unvec(&u, m, m)?;
    let mut b = unvec(&v, n, n)?;
    if trace(&a) < 0.0 {
        a.mapv_inplace(|x| -x);
        b.mapv_inplace(|x| -x);
    }
    let a = symmetrize(&a);
    let b = symmetrize(&b);

    let (a_reg, applied_a, definite_a) = regularize_factor(&a, cfg.alpha)?;
    let (b_reg, applied_b, definite_b) = regularize_factor(&b, cfg.alpha)?;

    let mut alpha = 0.0f64;
    let mut jitter_a = 0.0f64;
    let mut jitter_b = 0.0f64;
    match applied_a {
        Applied::None => {}
        Applied::Multiplicative(a_eff) => alpha = alpha.max(a_eff),
        Applied::Jitter(j) => jitter_a = j,
    }
    match applied_b {
        Applied::None => {}
        Applied::Multiplicative(a_eff) => alpha = alpha.max(a_eff),
        Applied::Jitter(j) => jitter_b = j,
    }

    Ok(KroneckerFactors {
        a: a_reg,
        b: b_reg,
        sigma,
        diagnostics: FactorDiagnostics {
            iterations: tsvd.iterations,
            residual: tsvd.residual,
            converged: tsvd.converged,
            alpha,
            jitter_a,
            jitter_b,
            definite: definite_a && definite_b,
        },
    })
}

/// Row-wise diagonal Fisher weights: `D_i = sqrt(Σ_j mean_b G_b[i,j]²)`.
#[derive(Debug, Clone)]
pub struct DiagonalFisherWeights {
    /// Length-n nonnegative row weights.
    pub d: Array1<f64>,
    /// Entrywise mean squared gradients, n x m.
    pub second_moments: Tensor,
}

impl DiagonalFisherWeights {
    /// `D²` row values, which equal the row-reaggregated diagonal of the
    /// explicit Fisher.
    pub fn squared(&self) -> Array1<f64> {
        self.d.mapv(|x| x * x)
    }
}

pub fn diagonal_fisher(acc: &GradientAccumulator) -> Result<DiagonalFisherWeights, FisherError> {
    acc.require_nonempty()?;
    let (n, m) = (acc.n, acc.m);
    let mut second_moments = Tensor::zeros((n, m));
    for g in &acc.batches {
        for i in 0..n {
            for j in 0..m {
                second_moments[[i, j]] += g[[i, j]] * g[[i, j]];
            }
        }
    }
    second_moments /= acc.count() as f64;
    let d = Array1::from_shape_fn(n, |i| {
        (0..m).map(|j| second_moments[[i, j]]).sum::<f64>().sqrt()
    });
    Ok(DiagonalFisherWeights { d, second_moments })
}
