use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dismax_core::calibration::{calibrate_temperature, DEFAULT_BINS};
use dismax_core::data::synth_blobs;
use dismax_core::dismax::TEMPERATURE_BOUNDS;
use dismax_core::numerics::finite_diff_gradient_with;
use dismax_core::pipeline::logits_matrix;
use dismax_core::scoring::score_dataset;
use dismax_core::train::{LossKind, TrainConfig};
use dismax_core::{Exec, Tensor};

fn network_and_data() -> (dismax_core::model::Network, dismax_core::data::Dataset) {
    let data = synth_blobs(10, 64, 400, 1.0, 7).unwrap();
    let cfg = TrainConfig {
        loss: LossKind::Dismax,
        hidden_dims: vec![128, 64],
        num_classes: 10,
        ..TrainConfig::default()
    };
    (cfg.init_network(64).unwrap(), data)
}

fn scoring(c: &mut Criterion) {
    let (net, data) = network_and_data();
    let mut g = c.benchmark_group("score_dataset");
    for &exec in Exec::available() {
        g.bench_with_input(BenchmarkId::from_parameter(exec.name()), &exec, |b, &e| {
            b.iter(|| score_dataset(e, &net, black_box(&data), "id").unwrap())
        });
    }
    g.finish();
}

fn calibration(c: &mut Criterion) {
    let (net, data) = network_and_data();
    let logits = logits_matrix(Exec::Sequential, &net, &data).unwrap();
    let labels = data.labels().unwrap();
    let mut g = c.benchmark_group("calibrate_temperature");
    for &exec in Exec::available() {
        g.bench_with_input(BenchmarkId::from_parameter(exec.name()), &exec, |b, &e| {
            b.iter(|| {
                calibrate_temperature(
                    e,
                    black_box(&logits),
                    labels,
                    DEFAULT_BINS,
                    TEMPERATURE_BOUNDS,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn finite_differences(c: &mut Criterion) {
    let x = Tensor::vector((0..256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let f = |t: &Tensor| -> f64 { t.data().iter().map(|v| (v * v).exp().ln_1p()).sum() };
    let mut g = c.benchmark_group("finite_diff_gradient");
    for &exec in Exec::available() {
        g.bench_with_input(BenchmarkId::from_parameter(exec.name()), &exec, |b, &e| {
            b.iter(|| finite_diff_gradient_with(e, f, black_box(&x), 1e-5).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scoring, calibration, finite_differences);
criterion_main!(benches);
