use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use landprobe::cav::{train_cav, CavConfig};
use landprobe::nn::init_encoder;
use landprobe::rnc::rnc_loss;
use landprobe::tcav::integrated_gradients_layer;
use landprobe::{ConceptActivations, IgConfig, LinearHead, Matrix, RncBatch, RncConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, shift: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn rnc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = RncConfig::default();
    for m in [32usize, 64] {
        let emb = random(m, 16, &mut rng, 0.0);
        let labels: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        c.bench_function(&format!("rnc_loss m={m}"), |b| {
            b.iter(|| rnc_loss(&RncBatch::new(black_box(&emb), &labels).unwrap(), &cfg).unwrap())
        });
    }
}

fn encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = init_encoder(&[192, 64, 64, 16], 3).unwrap();
    let x = random(64, 192, &mut rng, 0.0);
    c.bench_function("forward 64x192", |b| b.iter(|| enc.forward(black_box(&x)).unwrap()));
    let trace = enc.forward(&x).unwrap();
    let g = random(64, 16, &mut rng, 0.0);
    c.bench_function("backward 64x192", |b| {
        b.iter(|| enc.backward(&trace, black_box(&g)).unwrap())
    });
}

fn cav(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i:04}")).collect::<Vec<_>>();
    let pos = ConceptActivations::new("a", 2, random(200, 16, &mut rng, 0.5), ids("p", 200)).unwrap();
    let neg = ConceptActivations::new("b", 2, random(500, 16, &mut rng, -0.5), ids("n", 500)).unwrap();
    let cfg = CavConfig::default();
    c.bench_function("train_cav 200+500x16", |b| {
        b.iter(|| train_cav(black_box(&pos), &neg, &cfg, 9).unwrap())
    });
}

fn ig(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = init_encoder(&[192, 64, 64, 16], 6).unwrap();
    let head = LinearHead::new((0..16).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.0).unwrap();
    let x: Vec<f64> = (0..192).map(|_| rng.random_range(0.0..1.0)).collect();
    let cfg = IgConfig { steps: 50 };
    c.bench_function("integrated_gradients layer 0, m=50", |b| {
        b.iter(|| integrated_gradients_layer(&enc, &head, black_box(&x), 0, &cfg).unwrap())
    });
}

criterion_group!(benches, rnc, encoder, cav, ig);
criterion_main!(benches);
