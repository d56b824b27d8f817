//! Fisher-weighted low-rank compression of linear layers.
//!
//! The crate estimates the empirical Fisher information of a weight matrix
//! from per-batch gradients, extracts a nearest-Kronecker-product
//! factorization `A ⊗ B` of it with a matrix-free rank-1 SVD, and compresses
//! the weights with the Cholesky-transformed truncated SVD that is optimal
//! under that curvature model. Diagonally weighted SVD and plain SVD are
//! included as baselines, together with a toy training harness and a matvec
//! scaling benchmark for end-to-end verification.
//!
//! Modules:
//! - [`io`]: bit-exact `.gft` tensor files, gradient-set directories,
//!   JSON/CSV reports.
//! - [`linalg`]: dense Cholesky and triangular solves, full SVD, operator
//!   based truncated SVD, Kronecker/vec utilities under one fixed
//!   convention.
//! - [`fisher`]: gradient accumulation, the rearranged Fisher operator, and
//!   Kronecker factor extraction.
//! - [`compress`]: the three compression rules, error metrics, and the
//!   rank/retention planner.
//! - [`toy`]: synthetic classification tasks, an SGD trainer that collects
//!   gradients, and the method sweep.
//! - [`bench`]: wall-clock scaling of the structured matvec against the
//!   materialized operator.

pub mod bench;
pub mod compress;
pub mod fisher;
pub mod io;
pub mod linalg;
pub mod toy;

/// Dense row-major matrix of 64-bit floats; the universal value carrier.
pub type Tensor = ndarray::Array2<f64>;
