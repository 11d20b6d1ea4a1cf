//! Factorized vs direct 3D convolution, and the 2D spatial kernel that
//! dominates network runtime.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fstcn::factorized::{conv3d, conv_factorized, kron_expand, FactorizedKernel, VideoVolume};
use fstcn::tensor::conv2d;
use fstcn::{Padding, Tensor};

fn bench_factorized_vs_direct(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let volume = VideoVolume::new(Tensor::randn(&[32, 32, 16], 1.0, &mut rng)).unwrap();
    let fk = FactorizedKernel::new(
        Tensor::randn(&[5, 5], 1.0, &mut rng),
        Tensor::randn(&[3], 1.0, &mut rng),
    )
    .unwrap();
    let expanded = kron_expand(&fk);

    let mut group = c.benchmark_group("conv3d_32x32x16_k5x5x3");
    group.bench_function("direct", |b| {
        b.iter_batched(
            || (volume.clone(), expanded.clone()),
            |(v, k)| conv3d(&v, &k, Padding::Valid).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("factorized", |b| {
        b.iter_batched(
            || (volume.clone(), fk.clone()),
            |(v, k)| conv_factorized(&v, &k, Padding::Valid).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = Tensor::randn(&[32, 32, 12], 1.0, &mut rng);
    let kernels = Tensor::randn(&[3, 3, 12, 32], 0.1, &mut rng);
    c.bench_function("conv2d_32x32x12_to_32", |b| {
        b.iter(|| conv2d(&input, &kernels, 1, Padding::Same).unwrap())
    });
}

criterion_group!(benches, bench_factorized_vs_direct, bench_conv2d);
criterion_main!(benches);
