use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use eigenscore::gmm::{GaussianMixture, GmmSpec};
use eigenscore::par::Execution;
use eigenscore::pipeline::{raw_features, FeatureConfig};
use eigenscore::rng::RngStream;
use eigenscore::schedule::ScheduleSpec;

fn mixture() -> GaussianMixture {
    GaussianMixture::from_spec(GmmSpec {
        weights: vec![0.5, 0.3, 0.2],
        means: vec![vec![0.0; 4], vec![1.0, -1.0, 0.5, 0.0], vec![-1.0, 0.5, 0.0, 1.0]],
        covariances: vec![
            vec![0.5, 0.1, 0.0, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.2],
            vec![0.2, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.2],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.2, 0.0, 0.0, 0.2, 0.5],
        ],
    })
    .unwrap()
}

fn features(c: &mut Criterion) {
    let g = mixture();
    let sched = ScheduleSpec::default().build().unwrap();
    let cfg = FeatureConfig { repetitions: 5, ..Default::default() };
    let ts = cfg.resolve_timesteps(&sched).unwrap();
    let data = g.sample(64, &mut RngStream::from_seed(1));
    let mut group = c.benchmark_group("raw_features");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new(name, data.len()), &exec, |b, &exec| {
            b.iter(|| raw_features(&g, black_box(&data), &sched, &ts, &cfg, 7, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, features);
criterion_main!(benches);
