use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pocketlm_bench::{encoded_matrix, random_vec};
use pocketlm_core::kernels::{self, WeightView};
use pocketlm_core::quant::{self, DType};

const ROWS: usize = 1024;
const COLS: usize = 1024;

fn matvec(c: &mut Criterion) {
    let mut g = c.benchmark_group("matvec");
    g.throughput(Throughput::Elements((ROWS * COLS) as u64));
    let x = random_vec(1, COLS);
    for dtype in DType::ALL {
        let data = encoded_matrix(2, ROWS, COLS, dtype);
        let w = WeightView::new(dtype, ROWS, COLS, &data).unwrap();
        let mut out = vec![0.0; ROWS];
        g.bench_with_input(BenchmarkId::from_parameter(dtype), &w, |b, w| {
            b.iter(|| kernels::matvec_into(w, black_box(&x), &mut out).unwrap())
        });
    }
    g.finish();
}

fn quantize(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantize");
    let x = random_vec(3, 64 * 1024);
    g.throughput(Throughput::Elements(x.len() as u64));
    for dtype in [DType::F16, DType::Bq8, DType::Bq4, DType::Bq5s] {
        g.bench_function(BenchmarkId::from_parameter(dtype), |b| {
            b.iter(|| quant::quantize(black_box(&x), dtype).unwrap())
        });
    }
    g.finish();
}

fn small_ops(c: &mut Criterion) {
    let x = random_vec(4, 4096);
    let w = random_vec(5, 4096);
    c.bench_function("rmsnorm/4096", |b| {
        b.iter(|| kernels::rmsnorm(black_box(&x), &w, 1e-5).unwrap())
    });
    c.bench_function("softmax/32000", |b| {
        let logits = random_vec(6, 32_000);
        b.iter_batched_ref(
            || logits.clone(),
            |v| kernels::softmax_in_place(v).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, matvec, quantize, small_ops);
criterion_main!(benches);
