use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use esnet::matching::offset_range;
use esnet::network::{Network, NetworkConfig, Variant};
use esnet::{Graph, Tensor};

fn pattern(dims: [usize; 4], phase: f32) -> Tensor<f32> {
    Tensor::from_fn(dims, |b, c, y, x| ((b + 3 * c) as f32 + 0.37 * y as f32 + 0.61 * x as f32 + phase).sin())
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(ch, size) in &[(16, 64), (32, 32), (64, 16)] {
        let x = pattern([1, ch, size, size], 0.0);
        let w = pattern([ch, ch, 3, 3], 1.0).map(|v| v * 0.1);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}ch_{size}px")), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap());
                black_box(g.conv2d(xv, wv, None, 1, 1).unwrap());
            })
        });
    }
    group.finish();
}

fn correlate(c: &mut Criterion) {
    let l = pattern([1, 64, 32, 64], 0.0);
    let r = pattern([1, 64, 32, 64], 0.5);
    let offsets = offset_range(0, 39);
    c.bench_function("correlate_40_offsets", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (lv, rv) = (g.constant(l.clone()).unwrap(), g.constant(r.clone()).unwrap());
            black_box(g.correlate(lv, rv, &offsets).unwrap());
        })
    });
}

fn warp(c: &mut Criterion) {
    let f = pattern([1, 32, 64, 128], 0.0);
    let d = Tensor::from_fn([1, 1, 64, 128], |_, _, y, x| 2.0 + 0.05 * (x + y) as f32);
    c.bench_function("warp_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let fv = g.param(f.clone()).unwrap();
            let dv = g.param(d.clone()).unwrap();
            let out = g.warp(fv, dv).unwrap();
            let loss = g.sum(out).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(dv));
        })
    });
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_tiny_128x256");
    group.sample_size(10);
    let left = pattern([1, 3, 128, 256], 0.0).map(|v| 0.5 + 0.4 * v);
    let right = pattern([1, 3, 128, 256], 0.8).map(|v| 0.5 + 0.4 * v);
    for variant in [Variant::EsNet, Variant::EsNetM] {
        let net = Network::new(NetworkConfig::tiny(variant)).unwrap();
        let params = net.init_params::<f32>(1);
        group.bench_function(variant.name(), |b| {
            b.iter(|| black_box(net.predict(&params, &left, &right).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, correlate, warp, forward);
criterion_main!(benches);
