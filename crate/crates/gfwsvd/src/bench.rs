//! Wall-clock scaling of the structured rearranged-Fisher matvec.
//!
//! The structured path costs O(|D|(mn² + m²n)) per product; materializing
//! the rearranged matrix costs O(m²n²) per product and O(m²n²) memory, so
//! the explicit comparison is restricted to n = m ≤ 64 (≈134 MB). Before
//! anything is timed, every size passes a correctness gate: an explicit
//! matvec comparison where the materialization is feasible, adjoint
//! probes everywhere.

use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fisher::{
    rearranged_apply, rearranged_apply_transpose, FisherError, GradientAccumulator,
};
use crate::Tensor;

/// Largest n = m for which the rearranged matrix is materialized.
pub const EXPLICIT_BENCH_CAP: usize = 64;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error("correctness gate failed at n = {n}: relative error {rel:e}")]
    CorrectnessGate { n: usize, rel: f64 },
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Square sizes n = m to benchmark.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    /// Number of gradient batches |D| in the synthetic accumulator.
    pub batches: usize,
    pub seed: u64,
    /// Skip the explicit-operator rows entirely.
    pub structured_only: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: std::vec![32, 48, 64],
            repeats: 5,
            batches: 4,
            seed: 0,
            structured_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub mode: &'static str,
    pub median_seconds: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(time) against log(n) over the structured
    /// rows; None with fewer than two sizes.
    pub structured_slope: Option<f64>,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = samples.len();
    if k % 2 == 1 {
        samples[k / 2]
    } else {
        0.5 * (samples[k / 2 - 1] + samples[k / 2])
    }
}

/// Materialize the rearranged Fisher straight from the gradient entries,
/// independently of the structured matvec code path.
fn materialize_rearranged(acc: &GradientAccumulator) -> Tensor {
    let n = acc.n();
    let m = acc.m();
    let mut r = Tensor::zeros((m * m, n * n));
    for g in acc.batches() {
        for jq in 0..m {
            for jp in 0..m {
                let row = jp + jq * m;
                for iq in 0..n {
                    let gq = g[[iq, jq]];
                    if gq == 0.0 {
                        continue;
                    }
                    for ip in 0..n {
                        r[[row, ip + iq * n]] += g[[ip, jp]] * gq;
                    }
                }
            }
        }
    }
    r /= acc.count() as f64;
    r
}

fn synthetic_accumulator(n: usize, batches: usize, rng: &mut ChaCha8Rng) -> GradientAccumulator {
    let gs: Vec<Tensor> = (0..batches)
        .map(|_| Tensor::from_shape_fn((n, n), |_| rng.random_range(-1.0f64..1.0)))
        .collect();
    GradientAccumulator::from_batches(gs).expect("nonempty synthetic set")
}

fn rel_vec_err(got: &Array1<f64>, want: &Array1<f64>) -> f64 {
    let diff = (got - want).mapv(|x| x * x).sum().sqrt();
    let scale = want.mapv(|x| x * x).sum().sqrt().max(1e-300);
    diff / scale
}

/// Correctness gate for one size: adjoint probes always, full explicit
/// comparison when the materialization fits. Returns the materialized
/// operator when it was built so the timing pass can reuse it.
fn correctness_gate(
    acc: &GradientAccumulator,
    want_explicit: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Tensor>, BenchError> {
    let n = acc.n();
    let m = acc.m();
    for _ in 0..3 {
        let x = Array1::from_shape_fn(n * n, |_| rng.random_range(-1.0f64..1.0));
        let y = Array1::from_shape_fn(m * m, |_| rng.random_range(-1.0f64..1.0));
        let lhs = rearranged_apply(acc, &x)?.dot(&y);
        let rhs = x.dot(&rearranged_apply_transpose(acc, &y)?);
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
        if rel > 1e-10 {
            return Err(BenchError::CorrectnessGate { n, rel });
        }
    }
    if !want_explicit {
        return Ok(None);
    }
    let r = materialize_rearranged(acc);
    let z = Array1::from_shape_fn(n * n, |_| rng.random_range(-1.0f64..1.0));
    let structured = rearranged_apply(acc, &z)?;
    let explicit = r.dot(&z);
    let rel = rel_vec_err(&structured, &explicit);
    if rel > 1e-10 {
        return Err(BenchError::CorrectnessGate { n, rel });
    }
    Ok(Some(r))
}

/// Time the structured matvec across sizes, and the explicit matvec where
/// feasible. Gate failures abort before any timing is recorded.
pub fn bench_matvec(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.sizes.is_empty() {
        return Err(BenchError::InvalidConfig("no sizes given".into()));
    }
    if cfg.sizes.iter().any(|&s| s < 2) {
        return Err(BenchError::InvalidConfig("sizes must be at least 2".into()));
    }
    if cfg.repeats == 0 || cfg.batches == 0 {
        return Err(BenchError::InvalidConfig(
            "repeats and batches must be positive".into(),
        ));
    }

    let mut rows = Vec::new();
    let mut structured_points = Vec::new();
    for &n in &cfg.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64).wrapping_mul(0x9e3779b9));
        let acc = synthetic_accumulator(n, cfg.batches, &mut rng);
        let want_explicit = !cfg.structured_only && n <= EXPLICIT_BENCH_CAP;
        let explicit = correctness_gate(&acc, want_explicit, &mut rng)?;

        let z = Array1::from_shape_fn(n * n, |_| rng.random_range(-1.0f64..1.0));
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let out = rearranged_apply(&acc, &z)?;
            samples.push(start.elapsed().as_secs_f64());
            black_box(out);
        }
        let structured_median = median(&mut samples);
        rows.push(BenchRow {
            n,
            m: n,
            mode: "structured",
            median_seconds: structured_median,
            repeats: cfg.repeats,
        });
        structured_points.push((n as f64, structured_median));

        if let Some(r) = explicit {
            let mut samples = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let start = Instant::now();
                let out = r.dot(&z);
                samples.push(start.elapsed().as_secs_f64());
                black_box(out);
            }
            rows.push(BenchRow {
                n,
                m: n,
                mode: "explicit",
                median_seconds: median(&mut samples),
                repeats: cfg.repeats,
            });
        }
    }

    let structured_slope = if structured_points.len() >= 2 {
        Some(log_log_slope(&structured_points))
    } else {
        None
    };
    Ok(BenchReport {
        rows,
        structured_slope,
    })
}

fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(n, t) in points {
        let x = n.ln();
        let y = t.max(1e-12).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (k * sxy - sx * sy) / (k * sxx - sx * sx)
}

/// CSV with columns (n, m, mode, median_seconds, repeats).
pub fn write_bench_csv(report: &BenchReport, path: &Path) -> Result<(), BenchError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "n,m,mode,median_seconds,repeats")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.n, r.m, r.mode, r.median_seconds, r.repeats
        )?;
    }
    w.flush()?;
    Ok(())
}
