use bnn_bench::{model, sine_data};
use bnn_core::predictive::posterior_predictive_batch;
use bnn_core::{ElboConfig, IntervalMethod, RngStream, Tensor, TrainConfig, Trainer};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn bbb_step(c: &mut Criterion) {
    let data = sine_data(64);
    let cfg = ElboConfig::for_train_size(data.len());
    let mut group = c.benchmark_group("bbb_step");
    for layout in ["dense", "case2", "case1", "variational"] {
        let start = model(layout, &[32, 32]);
        group.bench_function(BenchmarkId::from_parameter(layout), |b| {
            let mut m = start.clone();
            let mut trainer = Trainer::new(TrainConfig::default()).unwrap();
            let mut rng = RngStream::new(0);
            b.iter(|| trainer.step(&mut m, &data.features, &data.targets, &cfg, &mut rng).unwrap());
        });
    }
    group.finish();
}

fn predictive(c: &mut Criterion) {
    let data = sine_data(256);
    let m = model("case2", &[32, 32]);
    let mut group = c.benchmark_group("predictive");
    for n_samples in [10, 100] {
        group.bench_function(BenchmarkId::from_parameter(n_samples), |b| {
            let mut rng = RngStream::new(0);
            b.iter(|| posterior_predictive_batch(&m, &data.features, n_samples, &mut rng, IntervalMethod::Gaussian).unwrap());
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = RngStream::new(3);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = Tensor::new(vec![n, n], rng.normals(n * n)).unwrap();
        let b = Tensor::new(vec![n, n], rng.normals(n * n)).unwrap();
        group.bench_function(BenchmarkId::from_parameter(n), |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bbb_step, predictive, matmul);
criterion_main!(benches);
