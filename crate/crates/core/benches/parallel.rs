//! Sequential vs rayon execution of the hot loops. Build with
//! `--no-default-features` to confirm the fallback path compiles and runs the
//! `parallel` cases sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radmamba::model::{presets, Model};
use radmamba::ssm::{scan_forward, ScanDims, ScanEngine};
use radmamba::tensor::kernels::{conv2d_direct, Conv2dGeom};
use radmamba::{ExecPolicy, Tensor};

const POLICIES: [(&str, ExecPolicy); 2] = [
    ("sequential", ExecPolicy::Sequential),
    ("parallel", ExecPolicy::Parallel),
];

fn random(n: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn scan(c: &mut Criterion) {
    let dims = ScanDims {
        batch: 16,
        len: 224,
        dim: 16,
        ds: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens = dims.batch * dims.len * dims.dim;
    let x = random(tokens, -1.0, 1.0, &mut rng);
    let abar = random(tokens * dims.ds, 0.5, 0.99, &mut rng);
    let bbar = random(tokens * dims.ds, -0.1, 0.1, &mut rng);
    let cm = random(dims.batch * dims.len * dims.ds, -1.0, 1.0, &mut rng);
    let d = random(dims.dim, -1.0, 1.0, &mut rng);

    let mut group = c.benchmark_group("scan");
    for engine in [ScanEngine::Sequential, ScanEngine::Blelloch] {
        for (name, policy) in POLICIES {
            group.bench_function(BenchmarkId::new(format!("{engine:?}"), name), |b| {
                b.iter(|| scan_forward(policy, engine, &dims, &x, &abar, &bbar, &cm, &d).unwrap())
            });
        }
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (xs, ws) = ([16, 1, 224, 224], [1, 1, 3, 3]);
    let g = Conv2dGeom::new(&xs, &ws, 1, (1, 1)).unwrap();
    let x = random(xs.iter().product(), 0.0, 1.0, &mut rng);
    let w = random(ws.iter().product(), -1.0, 1.0, &mut rng);

    let mut group = c.benchmark_group("conv2d");
    for (name, policy) in POLICIES {
        group.bench_function(name, |b| b.iter(|| conv2d_direct(policy, &g, &x, &w, None)));
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = Model::<f32>::init(presets::uog20(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<Tensor<f32>> = (0..16)
        .map(|_| Tensor::uniform(model.cfg.input_shape, 1.0, &mut rng))
        .collect();
    let refs: Vec<&Tensor<f32>> = xs.iter().collect();

    let mut group = c.benchmark_group("forward_uog20_b16");
    group.sample_size(20);
    for (name, policy) in POLICIES {
        group.bench_function(name, |b| b.iter(|| model.logits(&refs, policy).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, scan, conv, forward);
criterion_main!(benches);
