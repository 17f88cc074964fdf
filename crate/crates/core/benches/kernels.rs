use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stcnn::dictionary::{sparse_code, CodeOptions};
use stcnn::par::Exec;
use stcnn::tensor::{Graph, Padding, Tensor};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// One 3×3×3 U-Net layer at the top level: forward and backward.
fn conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&mut rng, &[8, 16, 16, 16]);
    let kernel = random(&mut rng, &[8, 8, 3, 3, 3]);
    let target = random(&mut rng, &[8, 16, 16, 16]);
    let mut group = c.benchmark_group("conv3d_8x16^3");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut g = Graph::with_exec(exec);
                let x = g.param(input.clone());
                let k = g.param(kernel.clone());
                let y = g.conv3d(x, k, Padding::Same).unwrap();
                let t = g.constant(target.clone());
                let loss = g.mse_loss(y, t).unwrap();
                g.backward(loss).unwrap();
                g.value(loss).data()[0]
            })
        });
    }
    group.finish();
}

/// Lasso coding of every voxel of a 16³ × 64 volume against 20 atoms.
fn lasso(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (t, k, v) = (64, 20, 4096);
    let mut d = DMatrix::from_fn(t, k, |_, _| rng.random_range(-1.0..1.0));
    for mut col in d.column_iter_mut() {
        let n = col.norm();
        col /= n;
    }
    let x = DMatrix::from_fn(t, v, |_, _| rng.random_range(-1.0..1.0));
    let opts = CodeOptions::default();
    let mut group = c.benchmark_group("sparse_code_4096_voxels");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sparse_code(&x, &d, 0.15, None, &opts, exec).unwrap().max_kkt)
        });
    }
    group.finish();
}

criterion_group!(benches, conv3d, lasso);
criterion_main!(benches);
