use criterion::{black_box, criterion_group, criterion_main, Criterion};
use esplit_core::autodiff::Graph;
use esplit_core::Tensor;

fn ramp(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp(vec![32, 8, 16, 16]);
    let w = ramp(vec![16, 8, 3, 3]);
    c.bench_function("conv3x3_forward_b32_8to16_16x16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wv = g.constant(w.clone()).unwrap();
            black_box(g.conv2d(xv, wv, None, 1, 1, 1).unwrap())
        })
    });
    c.bench_function("conv3x3_forward_backward_b32_8to16_16x16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone()).unwrap();
            let wv = g.param("w", w.clone()).unwrap();
            let y = g.conv2d(xv, wv, None, 1, 1, 1).unwrap();
            let l = g.sum(y);
            black_box(g.backward(l).unwrap())
        })
    });
}

criterion_group!(benches, conv);
criterion_main!(benches);
