//! Command-line pipeline for Fisher-weighted layer compression.
//!
//! Stages compose through the filesystem: `collect` writes weights and a
//! gradient set, `factorize` turns the set into curvature factors,
//! `compress` produces low-rank factors, `evaluate` scores them, and
//! `bench` measures matvec scaling. Every numeric input is validated
//! before any work starts; exit codes are 0 success, 2 validation,
//! 3 training divergence, 4 non-convergence, 5 definiteness,
//! 6 benchmark correctness gate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gfwsvd::bench::{bench_matvec, write_bench_csv, BenchConfig, BenchError};
use gfwsvd::compress::{
    fwsvd_compress, gfwsvd_compress_with_pair, svd_compress, CholeskyPair, CompressError,
    LowRankLayer, Method,
};
use gfwsvd::fisher::{
    diagonal_fisher, explicit_fim, extract_kronecker_factors, DiagonalFisherWeights,
    ExtractionConfig, FisherError, GradientAccumulator, EXPLICIT_FIM_CAP,
};
use gfwsvd::io::{
    read_gradient_set, read_tensor, write_gradient_set, write_json_canonical, write_report_csv,
    write_report_json, write_tensor, Report, ReportRecord,
};
use gfwsvd::linalg::fro_norm;
use gfwsvd::toy::{
    eval_loss, make_task, train_and_collect, TaskConfig, ToyError, ToyModel, TrainConfig,
};
use gfwsvd::Tensor;

const EXIT_VALIDATION: i32 = 2;
const EXIT_DIVERGENCE: i32 = 3;
const EXIT_NONCONVERGENCE: i32 = 4;
const EXIT_DEFINITENESS: i32 = 5;
const EXIT_BENCH_GATE: i32 = 6;

struct CliError {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl Into<String>) -> CliError {
    CliError {
        code,
        message: message.into(),
    }
}

fn validation(message: impl Into<String>) -> CliError {
    fail(EXIT_VALIDATION, message)
}

impl From<gfwsvd::io::IoError> for CliError {
    fn from(e: gfwsvd::io::IoError) -> Self {
        validation(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "gfwsvd",
    version,
    about = "Fisher-weighted low-rank layer compression pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the synthetic task and collect per-batch gradients.
    Collect(CollectArgs),
    /// Extract Kronecker factors and diagonal weights from a gradient set.
    Factorize(FactorizeArgs),
    /// Compress a weight matrix at a given rank.
    Compress(CompressArgs),
    /// Score compressed artifacts against the original weights.
    Evaluate(EvaluateArgs),
    /// Benchmark the structured matvec against the explicit operator.
    Bench(BenchArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Collect(args) => cmd_collect(args),
        Command::Factorize(args) => cmd_factorize(args),
        Command::Compress(args) => cmd_compress(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Bench(args) => cmd_bench(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| validation(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| validation(format!("bad config {}: {e}", p.display())))
        }
    }
}

// ---------------------------------------------------------------- collect

#[derive(Args)]
struct CollectArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the task, initialization, and batch order [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Number of classes (layer output dimension n) [default: 8].
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimension (layer input dimension m) [default: 16].
    #[arg(long)]
    features: Option<usize>,
    /// Training sample count [default: 4096].
    #[arg(long)]
    train: Option<usize>,
    /// Held-out evaluation sample count [default: 2048].
    #[arg(long)]
    eval: Option<usize>,
    /// SGD batch size; also the Fisher batch granularity [default: 32].
    #[arg(long)]
    batch: Option<usize>,
    /// SGD epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate [default: 0.5].
    #[arg(long)]
    lr: Option<f64>,
    /// Class mean offset scale relative to unit noise [default: 3].
    #[arg(long = "mean-scale")]
    mean_scale: Option<f64>,
    /// Within-class noise scale [default: 1].
    #[arg(long = "noise-scale")]
    noise_scale: Option<f64>,
    /// Output directory (receives W.gft, grads/, task.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CollectFile {
    seed: Option<u64>,
    classes: Option<usize>,
    features: Option<usize>,
    train: Option<usize>,
    eval: Option<usize>,
    batch: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    mean_scale: Option<f64>,
    noise_scale: Option<f64>,
    out: Option<PathBuf>,
}

/// Task and trainer configuration persisted next to the artifacts so that
/// later stages can regenerate the datasets.
#[derive(Serialize, Deserialize)]
struct TaskFile {
    task: TaskConfig,
    train: TrainConfig,
}

fn cmd_collect(args: CollectArgs) -> Result<(), CliError> {
    let file: CollectFile = load_config(args.config.as_deref())?;
    let task_defaults = TaskConfig::default();
    let train_defaults = TrainConfig::default();
    let seed = args.seed.or(file.seed).unwrap_or(task_defaults.seed);
    let task = TaskConfig {
        seed,
        n_classes: args
            .classes
            .or(file.classes)
            .unwrap_or(task_defaults.n_classes),
        feature_dim: args
            .features
            .or(file.features)
            .unwrap_or(task_defaults.feature_dim),
        n_train: args.train.or(file.train).unwrap_or(task_defaults.n_train),
        n_eval: args.eval.or(file.eval).unwrap_or(task_defaults.n_eval),
        mean_scale: args
            .mean_scale
            .or(file.mean_scale)
            .unwrap_or(task_defaults.mean_scale),
        noise_scale: args
            .noise_scale
            .or(file.noise_scale)
            .unwrap_or(task_defaults.noise_scale),
    };
    let train = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(train_defaults.epochs),
        batch_size: args
            .batch
            .or(file.batch)
            .unwrap_or(train_defaults.batch_size),
        learning_rate: args.lr.or(file.lr).unwrap_or(train_defaults.learning_rate),
        seed,
    };
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| validation("missing required --out directory"))?;

    let toy_task = make_task(&task).map_err(map_toy_error)?;
    let (model, acc) = train_and_collect(&toy_task, &train).map_err(map_toy_error)?;

    std::fs::create_dir_all(&out).map_err(|e| validation(e.to_string()))?;
    write_tensor(&model.weights, &out.join("W.gft"))?;
    write_gradient_set(acc.batches(), &out.join("grads"))?;
    write_json_canonical(&TaskFile { task, train }, &out.join("task.json"))?;
    println!(
        "collected {} batches into {}",
        acc.count(),
        out.join("grads").display()
    );
    Ok(())
}

fn map_toy_error(e: ToyError) -> CliError {
    match e {
        ToyError::Diverged => fail(EXIT_DIVERGENCE, e.to_string()),
        ToyError::InvalidConfig(_) => validation(e.to_string()),
        other => validation(other.to_string()),
    }
}

// -------------------------------------------------------------- factorize

#[derive(Args)]
struct FactorizeArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gradient-set directory (manifest.json plus .gft batches).
    #[arg(long)]
    grads: Option<PathBuf>,
    /// Output directory (receives A.gft, B.gft, D.gft, diagnostics.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Lanczos convergence tolerance [default: 1e-8].
    #[arg(long)]
    tol: Option<f64>,
    /// Cap on bidiagonalization steps [default: 200].
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    /// Multiplicative diagonal regularization strength [default: 0.01].
    #[arg(long)]
    alpha: Option<f64>,
    /// Seed for the solver start vector [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Emit artifacts even when the solver did not reach tolerance.
    #[arg(long = "allow-nonconverged", default_value_t = false)]
    allow_nonconverged: bool,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FactorizeFile {
    grads: Option<PathBuf>,
    out: Option<PathBuf>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    alpha: Option<f64>,
    seed: Option<u64>,
    allow_nonconverged: Option<bool>,
}

#[derive(Serialize)]
struct DiagnosticsFile {
    sigma: f64,
    iterations: usize,
    residual: f64,
    converged: bool,
    alpha: f64,
    jitter_a: f64,
    jitter_b: f64,
    definite: bool,
}

fn cmd_factorize(args: FactorizeArgs) -> Result<(), CliError> {
    let file: FactorizeFile = load_config(args.config.as_deref())?;
    let defaults = ExtractionConfig::default();
    let grads = args
        .grads
        .or(file.grads)
        .ok_or_else(|| validation("missing required --grads directory"))?;
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| validation("missing required --out directory"))?;
    let cfg = ExtractionConfig {
        tol: args.tol.or(file.tol).unwrap_or(defaults.tol),
        max_iter: args.max_iter.or(file.max_iter).unwrap_or(defaults.max_iter),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        alpha: args.alpha.or(file.alpha).unwrap_or(defaults.alpha),
    };
    if cfg.tol.is_nan() || cfg.tol <= 0.0 || cfg.max_iter == 0 || cfg.alpha < 0.0 {
        return Err(validation(
            "require tol > 0, max-iter > 0 and alpha >= 0".to_string(),
        ));
    }
    let allow = args.allow_nonconverged || file.allow_nonconverged.unwrap_or(false);

    let (_, batches) = read_gradient_set(&grads)?;
    let acc = GradientAccumulator::from_batches(batches).map_err(|e| validation(e.to_string()))?;
    let factors = extract_kronecker_factors(&acc, &cfg).map_err(|e| match e {
        FisherError::Definiteness(_) => fail(EXIT_NONCONVERGENCE, e.to_string()),
        other => validation(other.to_string()),
    })?;
    if !factors.diagnostics.converged && !allow {
        return Err(fail(
            EXIT_NONCONVERGENCE,
            format!(
                "factor solver did not converge after {} iterations (residual {:e}); \
                 rerun with --allow-nonconverged to keep the result",
                factors.diagnostics.iterations, factors.diagnostics.residual
            ),
        ));
    }
    if !factors.diagnostics.definite {
        return Err(fail(
            EXIT_NONCONVERGENCE,
            "extracted factors are not positive definite; increase --alpha to regularize",
        ));
    }
    let weights = diagonal_fisher(&acc).map_err(|e| validation(e.to_string()))?;

    std::fs::create_dir_all(&out).map_err(|e| validation(e.to_string()))?;
    write_tensor(&factors.a, &out.join("A.gft"))?;
    write_tensor(&factors.b, &out.join("B.gft"))?;
    let d_row = Tensor::from_shape_fn((1, weights.d.len()), |(_, j)| weights.d[j]);
    write_tensor(&d_row, &out.join("D.gft"))?;
    write_json_canonical(
        &DiagnosticsFile {
            sigma: factors.sigma,
            iterations: factors.diagnostics.iterations,
            residual: factors.diagnostics.residual,
            converged: factors.diagnostics.converged,
            alpha: factors.diagnostics.alpha,
            jitter_a: factors.diagnostics.jitter_a,
            jitter_b: factors.diagnostics.jitter_b,
            definite: factors.diagnostics.definite,
        },
        &out.join("diagnostics.json"),
    )?;
    println!(
        "factorized {} batches: sigma {:.6e}, {} iterations, residual {:.3e}",
        acc.count(),
        factors.sigma,
        factors.diagnostics.iterations,
        factors.diagnostics.residual
    );
    Ok(())
}

// --------------------------------------------------------------- compress

#[derive(Args)]
struct CompressArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight matrix to compress (W.gft).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// gfwsvd | fwsvd | svd.
    #[arg(long)]
    method: Option<String>,
    /// Truncation rank, in [1, min(n, m)].
    #[arg(long)]
    rank: Option<usize>,
    /// Factor directory from `factorize` (A.gft/B.gft/D.gft).
    #[arg(long)]
    factors: Option<PathBuf>,
    /// Output directory (receives W1.gft, W2.gft, metadata.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompressFile {
    weights: Option<PathBuf>,
    method: Option<String>,
    rank: Option<usize>,
    factors: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CompressMetadata {
    method: String,
    rank: usize,
    singular_values: Vec<f64>,
    weighted_error: f64,
    /// Relative Frobenius reconstruction error against the input weights.
    recon_relative: f64,
}

fn map_compress_error(e: CompressError) -> CliError {
    match e {
        CompressError::Definiteness(_) => fail(EXIT_DEFINITENESS, e.to_string()),
        other => validation(other.to_string()),
    }
}

fn load_pair(factors: &Path, n: usize, m: usize) -> Result<CholeskyPair, CliError> {
    let a = read_tensor(&factors.join("A.gft"))?;
    let b = read_tensor(&factors.join("B.gft"))?;
    if a.dim() != (m, m) || b.dim() != (n, n) {
        return Err(validation(format!(
            "factor dims {:?}/{:?} do not match weights {n}x{m}",
            a.dim(),
            b.dim()
        )));
    }
    CholeskyPair::from_spd(&a, &b).map_err(map_compress_error)
}

fn load_diag_weights(factors: &Path, n: usize) -> Result<DiagonalFisherWeights, CliError> {
    let d = read_tensor(&factors.join("D.gft"))?;
    if d.dim() != (1, n) {
        return Err(validation(format!(
            "D.gft has dims {:?}, expected 1x{n}",
            d.dim()
        )));
    }
    let row = ndarray::Array1::from_shape_fn(n, |j| d[[0, j]]);
    let second_moments = Tensor::from_shape_fn((n, 1), |(i, _)| row[i] * row[i]);
    Ok(DiagonalFisherWeights {
        d: row,
        second_moments,
    })
}

fn cmd_compress(args: CompressArgs) -> Result<(), CliError> {
    let file: CompressFile = load_config(args.config.as_deref())?;
    let weights_path = args
        .weights
        .or(file.weights)
        .ok_or_else(|| validation("missing required --weights file"))?;
    let method: Method = args
        .method
        .or(file.method)
        .ok_or_else(|| validation("missing required --method"))?
        .parse()
        .map_err(validation)?;
    let rank = args
        .rank
        .or(file.rank)
        .ok_or_else(|| validation("missing required --rank"))?;
    let factors = args.factors.or(file.factors);
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| validation("missing required --out directory"))?;

    let w = read_tensor(&weights_path)?;
    let (n, m) = w.dim();
    if rank == 0 || rank > n.min(m) {
        return Err(validation(format!(
            "rank {rank} out of range [1, {}]",
            n.min(m)
        )));
    }

    let curvature_pair = match factors.as_deref() {
        Some(dir) if dir.join("A.gft").exists() && dir.join("B.gft").exists() => {
            Some(load_pair(dir, n, m)?)
        }
        _ => None,
    };
    let layer = match method {
        Method::Gfwsvd => {
            let pair = curvature_pair
                .as_ref()
                .ok_or_else(|| validation("--method gfwsvd requires --factors with A.gft/B.gft"))?;
            gfwsvd_compress_with_pair(&w, pair, rank).map_err(map_compress_error)?
        }
        Method::Fwsvd => {
            let dir = factors
                .as_deref()
                .ok_or_else(|| validation("--method fwsvd requires --factors"))?;
            let dw = load_diag_weights(dir, n)?;
            fwsvd_compress(&w, &dw, rank).map_err(map_compress_error)?
        }
        Method::Svd => svd_compress(&w, rank).map_err(map_compress_error)?,
    };

    // The weighted error is reported against the curvature pair when one is
    // available; otherwise the identity pair makes it the plain squared
    // Frobenius error.
    let pair = curvature_pair.unwrap_or_else(|| CholeskyPair::identity(n, m));
    let we = gfwsvd::compress::weighted_error(&w, &layer, &pair);
    let recon_relative = fro_norm(&(&layer.reconstruct() - &w)) / fro_norm(&w).max(1e-300);

    std::fs::create_dir_all(&out).map_err(|e| validation(e.to_string()))?;
    write_tensor(&layer.w1, &out.join("W1.gft"))?;
    write_tensor(&layer.w2, &out.join("W2.gft"))?;
    write_json_canonical(
        &CompressMetadata {
            method: method.to_string(),
            rank,
            singular_values: layer.singular_values.clone(),
            weighted_error: we,
            recon_relative,
        },
        &out.join("metadata.json"),
    )?;
    println!("{method} rank {rank}: weighted_error {we:.6e}, recon {recon_relative:.3e}");
    Ok(())
}

// --------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Original weight matrix (W.gft).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Compressed artifact directories (repeatable).
    #[arg(long = "compressed")]
    compressed: Vec<PathBuf>,
    /// Factor directory; enables the curvature-weighted metric.
    #[arg(long)]
    factors: Option<PathBuf>,
    /// Gradient-set directory; enables the exact quadratic oracle when
    /// the explicit Fisher fits in memory.
    #[arg(long)]
    grads: Option<PathBuf>,
    /// task.json from `collect`; enables empirical loss and accuracy.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Output directory (receives report.json / report.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// json | csv | both.
    #[arg(long, default_value = "both")]
    format: String,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateFile {
    weights: Option<PathBuf>,
    compressed: Option<Vec<PathBuf>>,
    factors: Option<PathBuf>,
    grads: Option<PathBuf>,
    task: Option<PathBuf>,
    out: Option<PathBuf>,
    format: Option<String>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let file: EvaluateFile = load_config(args.config.as_deref())?;
    let weights_path = args
        .weights
        .or(file.weights)
        .ok_or_else(|| validation("missing required --weights file"))?;
    let compressed = if args.compressed.is_empty() {
        file.compressed.unwrap_or_default()
    } else {
        args.compressed
    };
    if compressed.is_empty() {
        return Err(validation("need at least one --compressed directory"));
    }
    let factors = args.factors.or(file.factors);
    let grads = args.grads.or(file.grads);
    let task_path = args.task.or(file.task);
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| validation("missing required --out directory"))?;
    let format = file
        .format
        .map(|f| f.to_lowercase())
        .filter(|_| args.format == "both")
        .unwrap_or_else(|| args.format.to_lowercase());
    if !matches!(format.as_str(), "json" | "csv" | "both") {
        return Err(validation(format!(
            "unknown format {format:?} (expected json|csv|both)"
        )));
    }

    let w = read_tensor(&weights_path)?;
    let (n, m) = w.dim();
    let pair = match factors.as_deref() {
        Some(dir) => load_pair(dir, n, m)?,
        None => CholeskyPair::identity(n, m),
    };
    let fim = match grads.as_deref() {
        Some(dir) if n * m <= EXPLICIT_FIM_CAP => {
            let (_, batches) = read_gradient_set(dir)?;
            let acc = GradientAccumulator::from_batches(batches)
                .map_err(|e| validation(e.to_string()))?;
            Some(explicit_fim(&acc).map_err(|e| validation(e.to_string()))?)
        }
        _ => None,
    };
    let task_ctx = match task_path.as_deref() {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| validation(format!("cannot read {}: {e}", p.display())))?;
            let tf: TaskFile =
                serde_json::from_str(&text).map_err(|e| validation(e.to_string()))?;
            let task = make_task(&tf.task).map_err(map_toy_error)?;
            let model = ToyModel { weights: w.clone() };
            let (loss0, _) = eval_loss(&model, &task.eval);
            Some((task, loss0))
        }
        None => None,
    };

    let mut records = Vec::new();
    for dir in &compressed {
        let meta_text = std::fs::read_to_string(dir.join("metadata.json"))
            .map_err(|e| validation(format!("missing metadata in {}: {e}", dir.display())))?;
        let meta: CompressMetadata =
            serde_json::from_str(&meta_text).map_err(|e| validation(e.to_string()))?;
        let method: Method = meta.method.parse().map_err(validation)?;
        let w1 = read_tensor(&dir.join("W1.gft"))?;
        let w2 = read_tensor(&dir.join("W2.gft"))?;
        if w2.nrows() != n || w1.ncols() != m || w1.nrows() != meta.rank || w2.ncols() != meta.rank
        {
            return Err(validation(format!(
                "artifact dims in {} do not match {n}x{m} rank {}",
                dir.display(),
                meta.rank
            )));
        }
        let layer = LowRankLayer {
            w1,
            w2,
            rank: meta.rank,
            method,
            singular_values: meta.singular_values.clone(),
        };
        let we = gfwsvd::compress::weighted_error(&w, &layer, &pair);
        let exact = match &fim {
            Some(f) => Some(
                gfwsvd::compress::exact_quadratic_increase(&w, &layer, f)
                    .map_err(map_compress_error)?,
            ),
            None => None,
        };
        let (delta_loss, accuracy) = match &task_ctx {
            Some((task, loss0)) => {
                let model = ToyModel {
                    weights: layer.reconstruct(),
                };
                let (loss, acc) = eval_loss(&model, &task.eval);
                (Some(loss - loss0), Some(acc))
            }
            None => (None, None),
        };
        let params = (meta.rank * (n + m)) as f64;
        records.push(ReportRecord {
            layer: "dense".into(),
            method: meta.method,
            rank: meta.rank,
            retention: params.min((n * m) as f64) / (n * m) as f64,
            weighted_error: we,
            exact_increase: exact,
            delta_loss,
            accuracy,
        });
    }

    std::fs::create_dir_all(&out).map_err(|e| validation(e.to_string()))?;
    if format == "json" || format == "both" {
        let mut meta = BTreeMap::new();
        meta.insert(
            "weights".to_string(),
            serde_json::json!(weights_path.display().to_string()),
        );
        meta.insert("n".to_string(), serde_json::json!(n));
        meta.insert("m".to_string(), serde_json::json!(m));
        let report = Report {
            meta,
            records: records.clone(),
        };
        write_report_json(&report, &out.join("report.json"))?;
    }
    if format == "csv" || format == "both" {
        write_report_csv(&records, &out.join("report.csv"))?;
    }
    for r in &records {
        println!(
            "{} rank {}: weighted_error {:.6e} delta_loss {}",
            r.method,
            r.rank,
            r.weighted_error,
            r.delta_loss
                .map(|d| format!("{d:.6e}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

// ------------------------------------------------------------------ bench

#[derive(Args)]
struct BenchArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated square sizes n = m [default: 32,48,64].
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Timing repetitions per size [default: 5].
    #[arg(long)]
    repeats: Option<usize>,
    /// Gradient batches |D| in the synthetic accumulator [default: 4].
    #[arg(long)]
    batches: Option<usize>,
    /// Seed for the synthetic gradients and probe vectors [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the explicit-operator rows.
    #[arg(long = "structured-only", default_value_t = false)]
    structured_only: bool,
    /// Output CSV path.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    sizes: Option<Vec<usize>>,
    repeats: Option<usize>,
    batches: Option<usize>,
    seed: Option<u64>,
    structured_only: Option<bool>,
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let file: BenchFile = load_config(args.config.as_deref())?;
    let defaults = BenchConfig::default();
    let sizes = if args.sizes.is_empty() {
        file.sizes.unwrap_or(defaults.sizes)
    } else {
        args.sizes
    };
    let cfg = BenchConfig {
        sizes,
        repeats: args.repeats.or(file.repeats).unwrap_or(defaults.repeats),
        batches: args.batches.or(file.batches).unwrap_or(defaults.batches),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        structured_only: args.structured_only || file.structured_only.unwrap_or(false),
    };
    let report = bench_matvec(&cfg).map_err(|e| match e {
        BenchError::CorrectnessGate { .. } => fail(EXIT_BENCH_GATE, e.to_string()),
        other => validation(other.to_string()),
    })?;
    write_bench_csv(&report, &args.out).map_err(|e| validation(e.to_string()))?;
    for row in &report.rows {
        println!(
            "n={} {}: {:.6e} s (median of {})",
            row.n, row.mode, row.median_seconds, row.repeats
        );
    }
    if let Some(slope) = report.structured_slope {
        println!("structured log-log slope: {slope:.3}");
    }
    Ok(())
}
