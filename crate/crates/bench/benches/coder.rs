use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use esplit_core::coder::{decode, encode};
use esplit_core::entropy_model::{init_prior, EntropyModel, CLAMP_BOUND, TABLE_PRECISION};
use esplit_core::quantizer::round_quantize;
use esplit_core::Tensor;

fn latent(c: usize, hw: usize) -> Tensor {
    let n = c * hw * hw;
    Tensor::new(vec![1, c, hw, hw], (0..n).map(|i| ((i * 7919) % 23) as f64 / 3.0 - 3.5).collect()).unwrap()
}

fn coder(c: &mut Criterion) {
    let channels = 16;
    let tables = EntropyModel::from_params(&init_prior(channels, 1))
        .unwrap()
        .export_cdf_table(CLAMP_BOUND, TABLE_PRECISION)
        .unwrap();
    let mut group = c.benchmark_group("range_coder");
    for hw in [8, 16, 32] {
        let code = round_quantize(&latent(channels, hw), 0).unwrap();
        let bits = encode(&code, &tables).unwrap();
        group.throughput(Throughput::Elements(code.len() as u64));
        group.bench_with_input(BenchmarkId::new("encode", hw), &code, |b, code| {
            b.iter(|| encode(black_box(code), &tables).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("decode", hw), &bits, |b, bits| {
            b.iter(|| decode(black_box(bits), &tables, code.shape, &code.escapes, 0).unwrap())
        });
    }
    group.finish();
    c.bench_function("export_cdf_table_16ch", |b| {
        let m = EntropyModel::from_params(&init_prior(channels, 1)).unwrap();
        b.iter(|| m.export_cdf_table(CLAMP_BOUND, TABLE_PRECISION).unwrap())
    });
}

criterion_group!(benches, coder);
criterion_main!(benches);
