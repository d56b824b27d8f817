//! The three compression rules, the weighted and exact surrogate error
//! metrics, and the rank/compression-rate planner.
//!
//! The curvature-weighted rule factors `A = L_A L_Aᵀ`, `B = L_B L_Bᵀ`,
//! truncates the SVD of the auxiliary matrix `W̃ = L_Bᵀ W L_A`, and maps
//! back through triangular solves; explicit inverses are never formed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fisher::{DiagonalFisherWeights, KroneckerFactors};
use crate::linalg::{
    cholesky_spd, full_svd, solve_triangular, vec, JitterPolicy, LinalgError, Side,
};
use crate::Tensor;

/// Floor applied to diagonal Fisher weights so zero-signal rows stay
/// decodable, as a fraction of the largest weight.
pub const FWSVD_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("rank {rank} out of range [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("factor not positive definite; regularize the factors first: {0}")]
    Definiteness(#[source] LinalgError),
    #[error("diagonal Fisher weights are all zero")]
    DegenerateWeights,
    #[error("retention target {target} not in (0, 1]")]
    InvalidTarget { target: f64 },
    #[error("retention target {target} infeasible: rank 1 already exceeds the budget")]
    InfeasibleTarget { target: f64 },
    #[error("planner needs at least one layer")]
    EmptyInventory,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gfwsvd,
    Fwsvd,
    Svd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gfwsvd, Method::Fwsvd, Method::Svd];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Gfwsvd => write!(f, "gfwsvd"),
            Method::Fwsvd => write!(f, "fwsvd"),
            Method::Svd => write!(f, "svd"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gfwsvd" => Ok(Method::Gfwsvd),
            "fwsvd" => Ok(Method::Fwsvd),
            "svd" => Ok(Method::Svd),
            other => Err(format!(
                "unknown method {other:?} (expected gfwsvd|fwsvd|svd)"
            )),
        }
    }
}

/// Lower-triangular Cholesky factors of the (regularized) Kronecker
/// factors, plus the perturbation record from their construction.
#[derive(Debug, Clone)]
pub struct CholeskyPair {
    /// m x m factor of A (column/input side).
    pub l_a: Tensor,
    /// n x n factor of B (row/output side).
    pub l_b: Tensor,
    pub jitter_a: f64,
    pub jitter_b: f64,
}

impl CholeskyPair {
    /// Factor arbitrary SPD weighting matrices, jitter-free.
    pub fn from_spd(a: &Tensor, b: &Tensor) -> Result<Self, CompressError> {
        let fa = cholesky_spd(a, JitterPolicy::Off).map_err(CompressError::Definiteness)?;
        let fb = cholesky_spd(b, JitterPolicy::Off).map_err(CompressError::Definiteness)?;
        Ok(Self {
            l_a: fa.l,
            l_b: fb.l,
            jitter_a: 0.0,
            jitter_b: 0.0,
        })
    }

    /// Factor extracted Kronecker factors; extraction already regularized
    /// them, so any failure here is a hard definiteness error.
    pub fn from_factors(f: &KroneckerFactors) -> Result<Self, CompressError> {
        let mut pair = Self::from_spd(&f.a, &f.b)?;
        pair.jitter_a = f.diagnostics.jitter_a;
        pair.jitter_b = f.diagnostics.jitter_b;
        Ok(pair)
    }

    /// Identity weighting: the plain-SVD special case.
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            l_a: Tensor::eye(m),
            l_b: Tensor::eye(n),
            jitter_a: 0.0,
            jitter_b: 0.0,
        }
    }
}

/// Rank-r factorization of a layer: the reconstruction is `w2 · w1`.
#[derive(Debug, Clone)]
pub struct LowRankLayer {
    /// r x m factor.
    pub w1: Tensor,
    /// n x r factor.
    pub w2: Tensor,
    pub rank: usize,
    pub method: Method,
    /// Kept leading singular values of the auxiliary problem.
    pub singular_values: Vec<f64>,
}

impl LowRankLayer {
    pub fn reconstruct(&self) -> Tensor {
        self.w2.dot(&self.w1)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w2.nrows(), self.w1.ncols())
    }
}

fn check_rank(rank: usize, n: usize, m: usize) -> Result<(), CompressError> {
    let max = n.min(m);
    if rank == 0 || rank > max {
        return Err(CompressError::RankOutOfRange { rank, max });
    }
    Ok(())
}

/// Curvature-weighted compression: truncated SVD of `W̃ = L_Bᵀ W L_A`,
/// mapped back with `W1 = √S V_rᵀ L_A⁻¹` and `W2 = L_B⁻ᵀ U_r √S` via
/// triangular solves.
pub fn gfwsvd_compress_with_pair(
    w: &Tensor,
    pair: &CholeskyPair,
    rank: usize,
) -> Result<LowRankLayer, CompressError> {
    let (n, m) = w.dim();
    check_rank(rank, n, m)?;
    if pair.l_b.nrows() != n || pair.l_a.nrows() != m {
        return Err(CompressError::DimMismatch(format!(
            "weights {n}x{m} against L_B {}x{} and L_A {}x{}",
            pair.l_b.nrows(),
            pair.l_b.ncols(),
            pair.l_a.nrows(),
            pair.l_a.ncols()
        )));
    }
    let aux = pair.l_b.t().dot(w).dot(&pair.l_a);
    let svd = full_svd(&aux)?;

    let mut sv_rt = Tensor::zeros((rank, m));
    let mut us_r = Tensor::zeros((n, rank));
    for t in 0..rank {
        let root = svd.s[t].sqrt();
        for j in 0..m {
            sv_rt[[t, j]] = root * svd.v[[j, t]];
        }
        for i in 0..n {
            us_r[[i, t]] = svd.u[[i, t]] * root;
        }
    }
    // W1 L_A = √S V_rᵀ and L_Bᵀ W2 = U_r √S.
    let w1 = solve_triangular(&pair.l_a, &sv_rt, Side::Right, false)?;
    let w2 = solve_triangular(&pair.l_b, &us_r, Side::Left, true)?;
    Ok(LowRankLayer {
        w1,
        w2,
        rank,
        method: Method::Gfwsvd,
        singular_values: svd.s[..rank].to_vec(),
    })
}

/// [`gfwsvd_compress_with_pair`] with the Cholesky step included.
pub fn gfwsvd_compress(
    w: &Tensor,
    factors: &KroneckerFactors,
    rank: usize,
) -> Result<LowRankLayer, CompressError> {
    let pair = CholeskyPair::from_factors(factors)?;
    gfwsvd_compress_with_pair(w, &pair, rank)
}

/// Diagonally weighted compression: truncated SVD of `diag(D) W` with
/// `W1 = √S V_rᵀ` and `W2 = diag(D)⁻¹ U_r √S`.
pub fn fwsvd_compress(
    w: &Tensor,
    weights: &DiagonalFisherWeights,
    rank: usize,
) -> Result<LowRankLayer, CompressError> {
    let (n, m) = w.dim();
    check_rank(rank, n, m)?;
    if weights.d.len() != n {
        return Err(CompressError::DimMismatch(format!(
            "weights {n}x{m} against {}-entry diagonal",
            weights.d.len()
        )));
    }
    let d_max = weights.d.iter().fold(0.0f64, |a, &x| a.max(x));
    if d_max <= 0.0 {
        return Err(CompressError::DegenerateWeights);
    }
    let floor = FWSVD_WEIGHT_FLOOR * d_max;
    let d: Vec<f64> = weights.d.iter().map(|&x| x.max(floor)).collect();

    let mut scaled = w.clone();
    for (i, mut row) in scaled.outer_iter_mut().enumerate() {
        row *= d[i];
    }
    let svd = full_svd(&scaled)?;

    let mut w1 = Tensor::zeros((rank, m));
    let mut w2 = Tensor::zeros((n, rank));
    for t in 0..rank {
        let root = svd.s[t].sqrt();
        for j in 0..m {
            w1[[t, j]] = root * svd.v[[j, t]];
        }
        for i in 0..n {
            w2[[i, t]] = svd.u[[i, t]] * root / d[i];
        }
    }
    Ok(LowRankLayer {
        w1,
        w2,
        rank,
        method: Method::Fwsvd,
        singular_values: svd.s[..rank].to_vec(),
    })
}

/// Plain truncated SVD baseline.
pub fn svd_compress(w: &Tensor, rank: usize) -> Result<LowRankLayer, CompressError> {
    let (n, m) = w.dim();
    check_rank(rank, n, m)?;
    let svd = full_svd(w)?;
    let mut w1 = Tensor::zeros((rank, m));
    let mut w2 = Tensor::zeros((n, rank));
    for t in 0..rank {
        let root = svd.s[t].sqrt();
        for j in 0..m {
            w1[[t, j]] = root * svd.v[[j, t]];
        }
        for i in 0..n {
            w2[[i, t]] = svd.u[[i, t]] * root;
        }
    }
    Ok(LowRankLayer {
        w1,
        w2,
        rank,
        method: Method::Svd,
        singular_values: svd.s[..rank].to_vec(),
    })
}

/// Curvature-weighted squared reconstruction error
/// `‖L_Bᵀ (W − W2 W1) L_A‖²_F`.
pub fn weighted_error(w: &Tensor, layer: &LowRankLayer, pair: &CholeskyPair) -> f64 {
    let delta = w - &layer.reconstruct();
    let t = pair.l_b.t().dot(&delta).dot(&pair.l_a);
    t.iter().map(|x| x * x).sum()
}

/// Un-factorized quadratic form `vec(Δ)ᵀ F vec(Δ)` against an explicit
/// Fisher; the oracle the Kronecker surrogate is measured against.
pub fn exact_quadratic_increase(
    w: &Tensor,
    layer: &LowRankLayer,
    fim: &Tensor,
) -> Result<f64, CompressError> {
    let (n, m) = w.dim();
    let nm = n * m;
    if fim.dim() != (nm, nm) {
        return Err(CompressError::DimMismatch(format!(
            "fisher is {}x{}, expected {nm}x{nm}",
            fim.nrows(),
            fim.ncols()
        )));
    }
    let delta = vec(&(w - &layer.reconstruct()));
    Ok(delta.dot(&fim.dot(&delta)))
}

/// One layer of a compression inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerShape {
    pub id: String,
    pub n: usize,
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanTarget {
    /// The same rank everywhere, clamped per layer to min(n, m).
    UniformRank(usize),
    /// Largest uniform rank whose factored parameter count stays within
    /// this fraction of the original parameters.
    Retention(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub original_params: u64,
    pub factored_params: u64,
    pub retention: f64,
    pub removal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub entries: Vec<PlanEntry>,
    /// Parameters outside the planned layers, kept dense; included in the
    /// global retention/removal fractions.
    pub fixed_params: u64,
    pub total_original: u64,
    pub total_factored: u64,
    pub retention: f64,
    pub removal: f64,
}

/// Stored parameters for a rank-r factorization of an n x m layer. A
/// factorization that would not save anything falls back to keeping the
/// dense matrix, so the count never exceeds n*m.
fn factored_params(n: usize, m: usize, rank: usize) -> u64 {
    let dense = (n as u64) * (m as u64);
    let factored = (rank as u64) * (n as u64 + m as u64);
    dense.min(factored)
}

fn plan_with_rank(layers: &[LayerShape], rank: usize, fixed_params: u64) -> CompressionPlan {
    let mut entries = Vec::with_capacity(layers.len());
    let mut total_original = fixed_params;
    let mut total_factored = fixed_params;
    for l in layers {
        let r = rank.min(l.n.min(l.m));
        let original = (l.n as u64) * (l.m as u64);
        let factored = factored_params(l.n, l.m, r);
        total_original += original;
        total_factored += factored;
        let retention = factored as f64 / original as f64;
        entries.push(PlanEntry {
            id: l.id.clone(),
            n: l.n,
            m: l.m,
            rank: r,
            original_params: original,
            factored_params: factored,
            retention,
            removal: 1.0 - retention,
        });
    }
    let retention = total_factored as f64 / total_original as f64;
    CompressionPlan {
        entries,
        fixed_params,
        total_original,
        total_factored,
        retention,
        removal: 1.0 - retention,
    }
}

/// Assign ranks across an inventory, either uniformly or against a global
/// parameter-retention budget. `fixed_params` counts parameters that are
/// never compressed but belong to the reported totals.
pub fn plan_ranks(
    layers: &[LayerShape],
    target: PlanTarget,
    fixed_params: u64,
) -> Result<CompressionPlan, CompressError> {
    if layers.is_empty() {
        return Err(CompressError::EmptyInventory);
    }
    match target {
        PlanTarget::UniformRank(rank) => {
            if rank == 0 {
                let max = layers.iter().map(|l| l.n.min(l.m)).max().unwrap_or(1);
                return Err(CompressError::RankOutOfRange { rank, max });
            }
            Ok(plan_with_rank(layers, rank, fixed_params))
        }
        PlanTarget::Retention(target_fraction) => {
            if !(target_fraction > 0.0 && target_fraction <= 1.0) {
                return Err(CompressError::InvalidTarget {
                    target: target_fraction,
                });
            }
            let planned_original: u64 = layers.iter().map(|l| (l.n as u64) * (l.m as u64)).sum();
            let budget = target_fraction * planned_original as f64;
            let max_rank = layers.iter().map(|l| l.n.min(l.m)).max().unwrap();
            let mut best: Option<usize> = None;
            for rank in 1..=max_rank {
                let factored: u64 = layers
                    .iter()
                    .map(|l| factored_params(l.n, l.m, rank.min(l.n.min(l.m))))
                    .sum();
                if factored as f64 <= budget {
                    best = Some(rank);
                } else {
                    break;
                }
            }
            let rank = best.ok_or(CompressError::InfeasibleTarget {
                target: target_fraction,
            })?;
            Ok(plan_with_rank(layers, rank, fixed_params))
        }
    }
}
