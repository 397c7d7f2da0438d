use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tcinn::autodiff::{ParamId, Tape};
use tcinn::metrics::ssim;
use tcinn::train::loss_hold_graph;
use tcinn_bench::{image, model};

/// Dense-block shapes: a hidden layer and the narrow output layer.
const CONV_SHAPES: [(usize, usize); 2] = [(65, 16), (113, 2)];

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3_64x64_batch4");
    g.sample_size(20);
    for (cin, cout) in CONV_SHAPES {
        let x = image(&[4, cin, 64, 64], 1);
        let k = image(&[cout, cin, 3, 3], 2).map(|v| v - 0.5);
        let b = image(&[cout], 3);
        let id = format!("{cin}to{cout}");
        g.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut t = Tape::<f32>::new();
                let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
                black_box(t.conv2d(xv, kv, Some(bv), 1, 1).unwrap());
            })
        });
        g.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                let mut t = Tape::<f32>::new();
                let xv = t.param(ParamId(0), x.clone()).unwrap();
                let kv = t.param(ParamId(1), k.clone()).unwrap();
                let bv = t.param(ParamId(2), b.clone()).unwrap();
                let y = t.conv2d(xv, kv, Some(bv), 1, 1).unwrap();
                let zero = t.constant(tcinn::Tensor::zeros(vec![4, cout, 64, 64]).unwrap());
                let loss = t.mse(y, zero).unwrap();
                black_box(t.backward(loss).unwrap());
            })
        });
    }
    g.finish();
}

fn model_maps(c: &mut Criterion) {
    let mut g = c.benchmark_group("model_64x64");
    g.sample_size(10);
    for channels in [3, 9] {
        let m = model(channels, 2);
        let x = image(&[1, channels, 64, 64], 4);
        g.bench_function(BenchmarkId::new("forward", channels), |b| b.iter(|| black_box(m.forward(&x).unwrap())));
        g.bench_function(BenchmarkId::new("inverse", channels), |b| b.iter(|| black_box(m.inverse(&x).unwrap())));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_64x64_batch4");
    g.sample_size(10);
    let m = model(3, 2);
    let (x, y) = (image(&[4, 3, 64, 64], 5), image(&[4, 3, 64, 64], 6));
    g.bench_function("loss_and_gradients", |b| {
        b.iter(|| {
            let mut t = Tape::<f32>::new();
            let bound = m.bind(&mut t, true).unwrap();
            let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
            let loss = loss_hold_graph(&mut t, &m, &bound, xv, yv, 1.0).unwrap();
            black_box(t.backward(loss.total).unwrap());
        })
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (image(&[1, 64, 64], 7), image(&[1, 64, 64], 8));
    c.bench_function("ssim_windowed_64x64", |bench| bench.iter(|| black_box(ssim(&a, &b).unwrap())));
}

criterion_group!(benches, conv, model_maps, train_step, metrics);
criterion_main!(benches);
