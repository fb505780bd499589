use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gtune_core::codec::{dequantize, quantize, QuantizedFrame};
use gtune_core::decorrelation::{dcor_value, DecorrelationConfig};
use gtune_core::model::train::{train_step, SegmentOptimizers};
use gtune_core::model::{build_model, LabeledBatch, ModelConfig, Targets, TokenBatch};
use gtune_core::optim::AdamConfig;
use gtune_core::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = random(&[100_000], &mut rng);
    let mut g = c.benchmark_group("codec");
    for bits in [4u8, 8] {
        g.bench_with_input(BenchmarkId::new("quantize_encode", bits), &bits, |b, &bits| {
            b.iter(|| quantize(black_box(&t), 1, bits, 99).unwrap().encode())
        });
        let bytes = quantize(&t, 1, bits, 99).unwrap().encode();
        g.bench_with_input(BenchmarkId::new("decode_dequantize", bits), &bytes, |b, bytes| {
            b.iter(|| dequantize(&QuantizedFrame::decode(black_box(bytes)).unwrap()))
        });
    }
    g.finish();
}

fn dcor(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = DecorrelationConfig::default().epsilon;
    let mut g = c.benchmark_group("dcor");
    for n in [64usize, 256] {
        let x = random(&[n, 64], &mut rng);
        let y = random(&[n, 64], &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| dcor_value(black_box(&x), black_box(&y), eps).unwrap())
        });
    }
    g.finish();
}

fn step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut m = build_model(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = LabeledBatch {
        tokens: TokenBatch::new(16, 16, (0..256).map(|_| rng.random_range(0..256)).collect()).unwrap(),
        targets: Targets::Last((0..16).map(|_| rng.random_range(0..256)).collect()),
    };
    let mut opt = SegmentOptimizers::new(AdamConfig::default(), &m.input, &m.backbone, &m.output, [true; 3]);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for (name, d) in [
        ("plain", DecorrelationConfig::off()),
        ("decorrelated", DecorrelationConfig::default()),
    ] {
        g.bench_function(name, |b| {
            b.iter(|| train_step(&mut m.input, &mut m.backbone, &mut m.output, &mut opt, &batch, &d).unwrap())
        });
    }
    g.finish();
}

criterion_group!(kernels, codec, dcor, step);
criterion_main!(kernels);
