//! End-to-end library pipeline through the public API: train, persist
//! gradients, reload, factorize, compress, and score, with every artifact
//! passing through the on-disk formats.

use gfwsvd::compress::{
    fwsvd_compress, gfwsvd_compress_with_pair, svd_compress, weighted_error, CholeskyPair, Method,
};
use gfwsvd::fisher::{
    diagonal_fisher, explicit_fim, extract_kronecker_factors, ExtractionConfig, GradientAccumulator,
};
use gfwsvd::io::{
    read_gradient_set, read_report_json, read_tensor, write_gradient_set, write_tensor,
};
use gfwsvd::linalg::fro_norm;
use gfwsvd::toy::{
    eval_loss, make_task, run_sweep, train_and_collect, SweepConfig, SweepExtraction, TaskConfig,
    ToyModel, TrainConfig,
};
use gfwsvd::Tensor;
use tempfile::tempdir;

fn small_sweep_config() -> SweepConfig {
    SweepConfig {
        task: TaskConfig {
            seed: 11,
            n_classes: 4,
            feature_dim: 8,
            n_train: 512,
            n_eval: 256,
            mean_scale: 2.0,
            noise_scale: 1.0,
        },
        train: TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.5,
            seed: 11,
        },
        extraction: SweepExtraction::default(),
        methods: Method::ALL.to_vec(),
        ranks: vec![1, 2, 4],
    }
}

#[test]
fn gradients_survive_disk_and_factorize_identically() {
    let cfg = small_sweep_config();
    let task = make_task(&cfg.task).unwrap();
    let (model, acc) = train_and_collect(&task, &cfg.train).unwrap();

    let dir = tempdir().unwrap();
    write_tensor(&model.weights, &dir.path().join("W.gft")).unwrap();
    write_gradient_set(acc.batches(), &dir.path().join("grads")).unwrap();

    let w_back = read_tensor(&dir.path().join("W.gft")).unwrap();
    assert_eq!(w_back, model.weights);
    let (manifest, batches) = read_gradient_set(&dir.path().join("grads")).unwrap();
    assert_eq!(manifest.count, acc.count());
    let acc_back = GradientAccumulator::from_batches(batches).unwrap();

    let extraction = ExtractionConfig::default();
    let direct = extract_kronecker_factors(&acc, &extraction).unwrap();
    let reloaded = extract_kronecker_factors(&acc_back, &extraction).unwrap();
    assert_eq!(direct.a, reloaded.a);
    assert_eq!(direct.b, reloaded.b);
    assert_eq!(direct.sigma, reloaded.sigma);
}

#[test]
fn compression_from_disk_factors_matches_in_memory() {
    let cfg = small_sweep_config();
    let task = make_task(&cfg.task).unwrap();
    let (model, acc) = train_and_collect(&task, &cfg.train).unwrap();
    let factors = extract_kronecker_factors(&acc, &ExtractionConfig::default()).unwrap();

    let dir = tempdir().unwrap();
    write_tensor(&factors.a, &dir.path().join("A.gft")).unwrap();
    write_tensor(&factors.b, &dir.path().join("B.gft")).unwrap();
    let a = read_tensor(&dir.path().join("A.gft")).unwrap();
    let b = read_tensor(&dir.path().join("B.gft")).unwrap();

    let pair_mem = CholeskyPair::from_factors(&factors).unwrap();
    let pair_disk = CholeskyPair::from_spd(&a, &b).unwrap();
    for rank in [1usize, 2, 4] {
        let from_mem = gfwsvd_compress_with_pair(&model.weights, &pair_mem, rank).unwrap();
        let from_disk = gfwsvd_compress_with_pair(&model.weights, &pair_disk, rank).unwrap();
        assert_eq!(from_mem.reconstruct(), from_disk.reconstruct());
    }
}

#[test]
fn weighted_error_ordering_holds_on_real_gradients() {
    let cfg = small_sweep_config();
    let task = make_task(&cfg.task).unwrap();
    let (model, acc) = train_and_collect(&task, &cfg.train).unwrap();
    let factors = extract_kronecker_factors(&acc, &ExtractionConfig::default()).unwrap();
    let pair = CholeskyPair::from_factors(&factors).unwrap();
    let weights = diagonal_fisher(&acc).unwrap();
    let fim = explicit_fim(&acc).unwrap();

    for rank in [1usize, 2, 3, 4] {
        let g = gfwsvd_compress_with_pair(&model.weights, &pair, rank).unwrap();
        let f = fwsvd_compress(&model.weights, &weights, rank).unwrap();
        let s = svd_compress(&model.weights, rank).unwrap();
        let ge = weighted_error(&model.weights, &g, &pair);
        assert!(ge <= weighted_error(&model.weights, &f, &pair) + 1e-10);
        assert!(ge <= weighted_error(&model.weights, &s, &pair) + 1e-10);

        // The un-factorized quadratic stays finite and nonnegative on all
        // three reconstructions.
        for layer in [&g, &f, &s] {
            let q =
                gfwsvd::compress::exact_quadratic_increase(&model.weights, layer, &fim).unwrap();
            assert!(q.is_finite() && q >= -1e-12);
        }
    }
}

#[test]
fn sweep_persists_a_readable_report() {
    let cfg = small_sweep_config();
    let dir = tempdir().unwrap();
    let report = run_sweep(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.records.len(), 9);

    let back = read_report_json(&dir.path().join("report.json")).unwrap();
    assert_eq!(back.records, report.records);
    assert!(back.meta.contains_key("sigma"));
    assert!(back.meta.contains_key("factor_diagnostics"));

    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);

    // Reconstructions at full rank evaluate like the original model.
    let task = make_task(&cfg.task).unwrap();
    let (model, _) = train_and_collect(&task, &cfg.train).unwrap();
    let full = svd_compress(&model.weights, 4).unwrap();
    let rec = ToyModel {
        weights: full.reconstruct(),
    };
    let (a, _) = eval_loss(&model, &task.eval);
    let (b, _) = eval_loss(&rec, &task.eval);
    assert!((a - b).abs() <= 1e-9);
    assert!(fro_norm(&(&full.reconstruct() - &model.weights)) <= 1e-9 * fro_norm(&model.weights));
}

#[test]
fn corrupted_artifacts_fail_loudly_not_silently() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("W.gft");
    write_tensor(&Tensor::eye(4), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    // Flipping a payload bit keeps the file well-formed; the value changes.
    std::fs::write(&path, &bytes).unwrap();
    let t = read_tensor(&path).unwrap();
    assert_ne!(t, Tensor::eye(4));

    // Dropping a byte breaks the length contract.
    std::fs::write(&path, &bytes[..last]).unwrap();
    assert!(read_tensor(&path).is_err());
}
