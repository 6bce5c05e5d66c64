use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mimseq::data::{generate_split, Split, SynthSpec};
use mimseq::harness::evaluate;
use mimseq::model::{Heads, ModelConfig, SequenceModel};
use mimseq::par::Exec;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_generation(c: &mut Criterion) {
    let spec = SynthSpec {
        train_per_class: 20,
        ..SynthSpec::default()
    };
    let mut group = c.benchmark_group("generate_split");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_split(&spec, Split::Train, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let spec = SynthSpec {
        test_per_class: 8,
        ..SynthSpec::default()
    };
    let seqs = generate_split(&spec, Split::Test, Exec::Parallel).unwrap();
    let cfg = ModelConfig {
        conv3d_channels: 8,
        hidden: 32,
        ..ModelConfig::desk()
    };
    let model = SequenceModel::<f32>::new(cfg, Heads { lmim: false, gmim: true }, 0).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &seqs, 16, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_mi_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("mi_oracle");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| mimseq::checks::mi_oracle(0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generation, bench_evaluation, bench_mi_oracle);
criterion_main!(benches);
