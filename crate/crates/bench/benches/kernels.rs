use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qcfs_core::converter::convert;
use qcfs_core::kernels::{conv2d, matmul};
use qcfs_core::qcfs::{qcfs_backward, qcfs_forward};
use qcfs_core::snn;
use qcfs_core::trainer::{build_model, loss_and_grads, TrainConfig};
use qcfs_core::{Architecture, QcfsParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut rng, &[64, 784]);
    let b = random(&mut rng, &[784, 100]);
    c.bench_function("matmul 64x784x100", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });

    let img = random(&mut rng, &[16, 1, 28, 28]);
    let k = random(&mut rng, &[16, 1, 3, 3]);
    c.bench_function("conv2d 16x1x28x28 16@3x3", |bench| {
        bench.iter(|| conv2d(black_box(&img), black_box(&k), 1, 1).unwrap())
    });

    let z = random(&mut rng, &[64, 100]);
    let up = random(&mut rng, &[64, 100]);
    let p = QcfsParams::new(4, 1.0, 0.5).unwrap();
    c.bench_function("qcfs forward 6400", |bench| {
        bench.iter(|| qcfs_forward(black_box(&z), &p))
    });
    c.bench_function("qcfs backward 6400", |bench| {
        bench.iter(|| qcfs_backward(black_box(&z), black_box(&up), &p).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = TrainConfig::default();
    let ann = build_model(Architecture::Mlp, &[784], 10, &cfg).unwrap();
    let x = random(&mut rng, &[64, 784]);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    c.bench_function("mlp loss and gradients, batch 64", |bench| {
        bench.iter(|| loss_and_grads(&ann, black_box(&x), &labels).unwrap())
    });

    let snn = convert(&ann, None).unwrap();
    let x = random(&mut rng, &[100, 784]);
    c.bench_function("snn run, 100 samples, T=32", |bench| {
        bench.iter(|| snn::run(&snn, black_box(&x), 32, false).unwrap())
    });
}

criterion_group!(benches, kernels, network);
criterion_main!(benches);
