use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use noisnn::arch::{init_params, parse_arch};
use noisnn::exec;
use noisnn::kernels;
use noisnn::rng::{Purpose, SeedTree};
use noisnn::runtime::{self, EvalOptions, NoiseKeys};
use noisnn::spiking::RenormParams;
use noisnn::tensor::Tensor;

const DEFAULT_ARCH: &str = "64C3-AP2-128C3-AP2-128C3-AP2-512FC-10FC";

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedTree::new(seed).simple(Purpose::Init, 0);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

const PATHS: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn conv(c: &mut Criterion) {
    let x = random(&[32, 64, 14, 14], 1);
    let k = random(&[128, 64, 3, 3], 2);
    let b = random(&[128], 3);
    let dout = random(&[32, 128, 14, 14], 4);
    let mut g = c.benchmark_group("conv3_64to128_14x14_b32");
    g.sample_size(10);
    for (name, seq) in PATHS {
        exec::force_sequential(seq);
        g.bench_function(BenchmarkId::new("forward", name), |bch| {
            bch.iter(|| kernels::conv3_forward(&x, &k, Some(&b)).unwrap())
        });
        g.bench_function(BenchmarkId::new("backward", name), |bch| {
            bch.iter(|| kernels::conv3_backward(&x, &k, &dout, true).unwrap())
        });
    }
    exec::force_sequential(false);
    g.finish();
}

fn fc(c: &mut Criterion) {
    let x = random(&[64, 1152], 5);
    let w = random(&[1152, 512], 6);
    let dout = random(&[64, 512], 7);
    let mut g = c.benchmark_group("fc_1152to512_b64");
    for (name, seq) in PATHS {
        exec::force_sequential(seq);
        g.bench_function(BenchmarkId::new("forward", name), |bch| {
            bch.iter(|| kernels::fc_forward(&x, &w, None).unwrap())
        });
        g.bench_function(BenchmarkId::new("backward", name), |bch| {
            bch.iter(|| kernels::fc_backward(&x, &w, &dout, true))
        });
    }
    exec::force_sequential(false);
    g.finish();
}

fn stage3_eval(c: &mut Criterion) {
    let spec = parse_arch(DEFAULT_ARCH, &[1, 28, 28]).unwrap();
    let params = init_params(&spec, &mut SeedTree::new(1).simple(Purpose::Init, 0));
    let x = random(&[16, 1, 28, 28], 8).map(|v| v.abs());
    let mut g = c.benchmark_group("default_arch_stage3_T10_b16");
    g.sample_size(10);
    for (name, seq) in PATHS {
        exec::force_sequential(seq);
        g.bench_function(name, |bch| {
            bch.iter(|| {
                runtime::forward_stage3(
                    &params,
                    &spec,
                    &x,
                    10,
                    &RenormParams::default(),
                    &NoiseKeys::eval(0, 0),
                    EvalOptions::default(),
                )
                .unwrap()
            })
        });
    }
    exec::force_sequential(false);
    g.finish();
}

criterion_group!(benches, conv, fc, stage3_eval);
criterion_main!(benches);
