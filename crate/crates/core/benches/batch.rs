//! Sequential against parallel execution of the batch-level work.
//!
//! With the `parallel` feature off both modes run the same loop, so the
//! pairs of numbers should match.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mac_core::exec::Execution;
use mac_core::textpipe::Vocabulary;
use mac_core::trainer::{
    embed_pairs, generate_dataset, initial_checkpoint, train, SessionConfig, SyntheticDatasetSpec,
};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticDatasetSpec {
        count: 32,
        ..Default::default()
    };
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    let session = SessionConfig::desk();
    let vocab = Vocabulary::build(ds.captions(), session.train.max_words);
    let ck = initial_checkpoint(session.clone(), vocab).unwrap();

    let mut group = c.benchmark_group("embed_pairs");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| embed_pairs(&ck, &ds.samples, 4, exec).unwrap())
        });
    }
    group.finish();

    let mut one_epoch = session;
    one_epoch.train.epochs_a = 0;
    one_epoch.train.epochs_b = 1;
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train(one_epoch.clone(), &ds, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
