use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drn::model::{build, ArchFamily, WidthMultiplier};
use drn::ops::{conv2d, conv2d_backward, ConvParams, Filter, Mode};
use drn::{Shape, Tensor};

fn ramp(shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |n, c, h, w| (((n * 31 + c * 17 + h * 7 + w * 3) % 23) as f32 - 11.0) / 11.0)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3_64ch_56px");
    let x = ramp(Shape::new(1, 64, 56, 56).unwrap());
    for dilation in [1, 2, 4] {
        let p = ConvParams::same(64, 64, 3, 1, dilation);
        let f = Filter::new(ramp(p.weight_shape().unwrap()), None);
        group.bench_with_input(BenchmarkId::new("forward", dilation), &dilation, |b, _| {
            b.iter(|| conv2d(black_box(&x), &f, &p).unwrap())
        });
        let y = conv2d(&x, &f, &p).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", dilation), &dilation, |b, _| {
            b.iter(|| conv2d_backward(black_box(&x), &f, &p, &y).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_eighth_width_112px");
    group.sample_size(10);
    let x = ramp(Shape::new(1, 3, 112, 112).unwrap());
    let width = WidthMultiplier::new(1, 8).unwrap();
    for (arch, depth) in [(ArchFamily::ResNet, 18), (ArchFamily::DrnA, 18), (ArchFamily::DrnC, 26)] {
        let m = build(arch, depth, 10, width, 0).unwrap();
        group.bench_function(m.name(), |b| {
            b.iter(|| drn::model::forward(&m, black_box(&x), Mode::Eval, &[]).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, network);
criterion_main!(benches);
