//! Sequential vs. parallel execution of the data-parallel stages: candidate
//! retrieval with feature assembly, evaluation, and toy text encoding.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmel_core::fusion::ModelParams;
use mmel_core::harness::{self, evaluate, Inputs, RunConfig};
use mmel_core::synth::{self, SynthConfig, SynthKind};
use mmel_core::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn stages(c: &mut Criterion) {
    let bench = synth::generate(SynthKind::Ranking, &SynthConfig { entities: 300, dim: 32, ..SynthConfig::default() }).unwrap();
    let inputs = Inputs::new(bench.entities.clone(), bench.store.clone()).unwrap();
    let cfg = RunConfig { lambda: 50, ..synth::desk_config(32, 0) };
    let params = ModelParams::init(cfg.dims(32), cfg.init(), 0).unwrap();

    let mut group = c.benchmark_group("prepare_split");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                harness::prepare_split("train", &bench.train, &inputs.table, &inputs.index, &inputs.store, cfg.lambda, false, exec).unwrap()
            })
        });
    }
    group.finish();

    let split = inputs.prepare("train", &bench.train, &cfg).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&params, &split, &inputs.table, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("encode_toy");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| harness::encode_toy(&bench.train, &bench.entities, &[], 7, 64, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
