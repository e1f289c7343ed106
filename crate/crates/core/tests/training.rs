//! Training, evaluation and checkpoint round trips on a small synthetic
//! benchmark.

use std::fs;

use mmel_core::harness::{
    self, evaluate, merge_reports, train, Checkpoint, Inputs, LossRecord, RunConfig, CHECKPOINT_FILE, LOSS_LOG_FILE, TRAIN_SUMMARY_FILE,
};
use mmel_core::synth::{self, SynthBenchmark, SynthConfig, SynthKind};
use mmel_core::Exec;

fn small() -> (SynthBenchmark, RunConfig) {
    let bench = synth::generate(SynthKind::Ranking, &SynthConfig { entities: 40, dim: 16, seed: 4, ..SynthConfig::default() }).unwrap();
    let cfg = RunConfig { max_steps: 60, eval_every: 20, patience: 0, ..synth::desk_config(16, 4) };
    (bench, cfg)
}

#[test]
fn sequential_and_parallel_paths_agree() {
    let (bench, cfg) = small();
    let inputs = Inputs::new(bench.entities.clone(), bench.store.clone()).unwrap();
    let seq = harness::prepare_split("dev", &bench.dev, &inputs.table, &inputs.index, &inputs.store, 20, false, Exec::Sequential).unwrap();
    let par = harness::prepare_split("dev", &bench.dev, &inputs.table, &inputs.index, &inputs.store, 20, false, Exec::Parallel).unwrap();
    assert_eq!(seq, par);

    let tr = inputs.prepare("train", &bench.train, &cfg).unwrap();
    let out = train(&cfg, &tr, Some(&seq), &inputs.table, None).unwrap();
    let a = evaluate(&out.final_params, &seq, &inputs.table, Exec::Sequential).unwrap();
    let b = evaluate(&out.final_params, &seq, &inputs.table, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let (bench, cfg) = small();
    let inputs = Inputs::new(bench.entities.clone(), bench.store.clone()).unwrap();
    let tr = inputs.prepare("train", &bench.train, &cfg).unwrap();
    let dev = inputs.prepare("dev", &bench.dev, &cfg).unwrap();
    let out = train(&cfg, &tr, Some(&dev), &inputs.table, None).unwrap();
    let before = evaluate(&out.best.params().unwrap(), &dev, &inputs.table, Exec::Sequential).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt.json");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let after = evaluate(&loaded.params().unwrap(), &dev, &inputs.table, Exec::Sequential).unwrap();
    assert_eq!(before, after);
    assert_eq!(loaded.dev_metrics, out.best.dev_metrics);
}

#[test]
fn training_lowers_the_loss_and_selects_the_best_dev_checkpoint() {
    let (bench, cfg) = small();
    let inputs = Inputs::new(bench.entities.clone(), bench.store.clone()).unwrap();
    let tr = inputs.prepare("train", &bench.train, &cfg).unwrap();
    let dev = inputs.prepare("dev", &bench.dev, &cfg).unwrap();
    let out = train(&cfg, &tr, Some(&dev), &inputs.table, None).unwrap();
    assert_eq!(out.steps, 60);
    assert_eq!(out.losses.len(), 60);
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    assert!(mean(&out.losses[50..]) < mean(&out.losses[..10]), "loss did not go down");
    assert_eq!(out.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![20, 40, 60]);

    let best_t1 = out.evals.iter().map(|e| e.topk[&1]).fold(f64::MIN, f64::max);
    let first_best = out.evals.iter().find(|e| e.topk[&1] == best_t1).unwrap();
    assert_eq!(out.best.step, first_best.step, "ties go to the earliest evaluation");
    assert_eq!(out.best.dev_metrics[&1], best_t1);
}

#[test]
fn patience_stops_training_early() {
    let (bench, cfg) = small();
    let cfg = RunConfig { max_steps: 0, epochs: 50, eval_every: 5, patience: 2, ..cfg };
    let inputs = Inputs::new(bench.entities.clone(), bench.store.clone()).unwrap();
    let tr = inputs.prepare("train", &bench.train, &cfg).unwrap();
    let dev = inputs.prepare("dev", &bench.dev, &cfg).unwrap();
    let out = train(&cfg, &tr, Some(&dev), &inputs.table, None).unwrap();
    assert!(out.stopped_early);
    let best = out.evals.iter().position(|e| e.step == out.best.step).unwrap();
    assert_eq!(out.evals.len(), best + 1 + 2, "stops after two evaluations without improvement");
}

#[test]
fn run_train_writes_artifacts_and_run_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, base) = small();
    let cfg = bench.write(dir.path(), &base).unwrap();
    let summary = harness::run_train(&cfg).unwrap();
    let out_dir = cfg.output_dir.clone().unwrap();
    for f in [CHECKPOINT_FILE, LOSS_LOG_FILE, TRAIN_SUMMARY_FILE, "config.toml"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(out_dir.join(LOSS_LOG_FILE)).unwrap();
    let records: Vec<LossRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), summary.steps);
    assert_eq!(records.last().map(|r| r.loss), summary.final_loss);

    let resolved = RunConfig::load(&out_dir.join("config.toml")).unwrap();
    assert_eq!(resolved, cfg);

    let test = cfg.test_samples.clone().unwrap();
    let table = harness::run_eval(&cfg, &summary.checkpoint, &test, "synthetic", "test").unwrap();
    assert_eq!(table.samples, bench.test.len());
    assert!(table.at(1).unwrap() > 0.5);

    let report = dir.path().join("test.json");
    harness::write_report(&report, &table).unwrap();
    let merged = merge_reports(&[&report, &report]).unwrap();
    assert_eq!(merged, vec![table.clone(), table]);
}

#[test]
fn evaluation_refuses_a_checkpoint_with_other_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let (bench, base) = small();
    let cfg = bench.write(dir.path(), &base).unwrap();
    let summary = harness::run_train(&cfg).unwrap();
    let other = RunConfig { d: 8, ..cfg.clone() };
    let err = harness::run_eval(&other, &summary.checkpoint, cfg.test_samples.as_ref().unwrap(), "synthetic", "test").unwrap_err();
    assert_eq!(err.code(), "checkpoint", "{err}");

    let missing = dir.path().join("nope.ckpt.json");
    let err = harness::run_eval(&cfg, &missing, cfg.test_samples.as_ref().unwrap(), "synthetic", "test").unwrap_err();
    assert!(err.to_string().contains("nope.ckpt.json"));
}
