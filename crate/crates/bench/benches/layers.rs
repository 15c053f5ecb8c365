use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qcnn::inference::{qconv_forward, qfc_forward};
use qcnn::quant::{kmeans, KMeansParams};
use qcnn::tensor::{conv_forward, fc_forward};
use qcnn::ConvLayerSpec;
use qcnn_bench::{conv_pair, fc_pair, uniform};
use std::hint::black_box;

fn fc(c: &mut Criterion) {
    let mut g = c.benchmark_group("fc 4096x4096");
    let x = uniform(vec![4096], 9);
    for (d, k) in [(4, 16), (4, 64), (8, 256)] {
        let (w, q) = fc_pair(4096, 4096, d, k);
        if d == 4 && k == 16 {
            g.bench_function("dense", |b| {
                b.iter(|| fc_forward(&w, None, black_box(&x)).unwrap())
            });
        }
        g.bench_with_input(
            BenchmarkId::new("lookup", format!("{d}/{k}")),
            &q,
            |b, q| b.iter(|| qfc_forward(q, black_box(&x)).unwrap()),
        );
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv 3x3 64->64 on 28x28");
    g.sample_size(20);
    let spec = ConvLayerSpec::simple(64, 64, 3, 1, 1);
    let x = uniform(vec![28, 28, 64], 9);
    let (w, _) = conv_pair(&spec, 8, 16);
    g.bench_function("dense", |b| {
        b.iter(|| conv_forward(&w, None, black_box(&x), &spec).unwrap())
    });
    for (d, k) in [(8, 16), (8, 64)] {
        let (_, q) = conv_pair(&spec, d, k);
        g.bench_with_input(
            BenchmarkId::new("lookup", format!("{d}/{k}")),
            &q,
            |b, q| b.iter(|| qconv_forward(q, black_box(&x)).unwrap()),
        );
    }
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let mut g = c.benchmark_group("kmeans 4096 points");
    g.sample_size(10);
    let points = uniform(vec![4096, 4], 5);
    for k in [16, 64] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| kmeans(points.data(), 4, k, &KMeansParams::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, fc, conv, clustering);
criterion_main!(benches);
