//! Hot paths of the pipeline. Every benchmark id carries the backend name, so
//! running once with default features and once with `--no-default-features`
//! puts the rayon and sequential numbers side by side in the criterion report.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pim::augment::{build_pretrain_set, AugmentConfig};
use pim::dsp::dtw_distance;
use pim::eval::{load_series, prepare, window_all, ExperimentConfig, PreparedData};
use pim::model::{
    evaluate_loss, heads_for, pretrain_session, EncoderSpec, LossWeights, Objective, TrainConfig,
};
use pim::nn::{conv1d_forward, Tensor};
use pim::par;

fn backend() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn data() -> PreparedData {
    let cfg = ExperimentConfig::synthetic();
    let series = load_series(&cfg).unwrap();
    let (layout, rate, windows) = window_all(&series, &cfg.windowing).unwrap();
    prepare(&cfg, &layout, rate, windows).unwrap()
}

fn tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let x = tensor(&mut r, &[8, 12, 200]);
    let w = tensor(&mut r, &[32, 12, 24]);
    let b = tensor(&mut r, &[32]);
    c.bench_function("conv1d_forward 8x12x200 k24", |bench| {
        bench.iter(|| conv1d_forward(black_box(&x), &w, &b, 1).unwrap())
    });
    let s1: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..1.0)).collect();
    let s2: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..1.0)).collect();
    c.bench_function("dtw 100x100", |bench| {
        bench.iter(|| dtw_distance(black_box(&s1), &s2, None).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let data = data();
    let windows = &data.pretrain[..64];
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);

    g.bench_function(
        BenchmarkId::new("pseudo_label_features_64", backend()),
        |bench| bench.iter(|| data.labeler.features_all(black_box(windows)).unwrap()),
    );

    g.bench_function(BenchmarkId::new("augment_64", backend()), |bench| {
        bench.iter(|| build_pretrain_set(black_box(windows), &AugmentConfig::default(), 0).unwrap())
    });

    let heads = heads_for(&data.labeler).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        ..TrainConfig::default()
    };
    let session = pretrain_session(
        windows,
        &heads,
        &EncoderSpec::default(),
        &cfg,
        LossWeights::default(),
    )
    .unwrap();
    g.bench_function(BenchmarkId::new("pretrain_epoch_64", backend()), |bench| {
        bench.iter_batched(
            || session.clone(),
            |mut s| s.run_epoch(windows, &[]).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });

    let objective = Objective::Pretrain(LossWeights::default());
    g.bench_function(BenchmarkId::new("evaluate_loss_64", backend()), |bench| {
        bench.iter(|| evaluate_loss(&session.model, black_box(windows), &objective).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels, pipeline);
criterion_main!(benches);
