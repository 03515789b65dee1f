//! Sequential versus rayon execution of the per-instance work.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use par_core::clozegen::{generate_instances, ClozeInstance};
use par_core::corpus::build_vocabulary;
use par_core::eval::evaluate;
use par_core::exec::Executor;
use par_core::model::{EncodedInstance, ParConfig, ParModel};
use par_core::synth::{random_corpus, SynthConfig};
use par_core::trainer::{batch_objective, DropoutSeed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(hops: usize) -> (ParModel, Vec<ClozeInstance>, Vec<EncodedInstance>) {
    let corpus = random_corpus(&SynthConfig::default(), 60, 0);
    let instances: Vec<ClozeInstance> = corpus.iter().flat_map(generate_instances).take(64).collect();
    let config = ParConfig {
        num_hops: hops,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = ParModel::new(config, build_vocabulary(&corpus, 1), &mut rng).unwrap();
    let encoded = instances.iter().map(|i| model.encode(i).unwrap()).collect();
    (model, instances, encoded)
}

fn executors() -> Vec<(&'static str, Executor)> {
    let workers = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    vec![
        ("sequential", Executor::sequential()),
        ("parallel", Executor::new(workers).unwrap()),
    ]
}

fn bench_batch_objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_objective");
    for hops in [1, 2] {
        let (model, _, encoded) = setup(hops);
        let batch: Vec<(usize, &EncodedInstance)> = encoded.iter().take(16).enumerate().collect();
        for (name, exec) in executors() {
            group.bench_with_input(BenchmarkId::new(name, format!("{hops}hop")), &batch, |b, batch| {
                b.iter(|| {
                    batch_objective(&model.params, &model.config, batch, 0.0, Some(DropoutSeed { seed: 0, epoch: 0 }), &exec)
                })
            });
        }
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    let (model, instances, _) = setup(2);
    for (name, exec) in executors() {
        group.bench_function(name, |b| b.iter(|| evaluate(&model, &instances, &exec)));
    }
    group.finish();
}

criterion_group!(benches, bench_batch_objective, bench_evaluate);
criterion_main!(benches);
