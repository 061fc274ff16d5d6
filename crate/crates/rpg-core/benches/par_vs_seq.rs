//! Rayon vs sequential comparison across the data-parallel hot paths:
//! convolution forward/backward, a full optimizer step, kernel
//! generation, and the Monte Carlo proposition trials.
//!
//! Both paths produce bit-identical results; `par::run_sequential` forces
//! the fallback inside one binary so the comparison needs no rebuild.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use rpg_core::analysis::{verify_props, Ensemble};
use rpg_core::data;
use rpg_core::detrand;
use rpg_core::model::{micro_res_net, Network};
use rpg_core::nn::conv::{conv2d_backward, conv2d_forward};
use rpg_core::nn::tensor::Tensor;
use rpg_core::par::run_sequential;
use rpg_core::ring::{GenMode, Grouping, RingSizing};
use rpg_core::train::{train_step, OptState, TrainConfig};

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut buf = vec![0.0f64; shape.iter().product()];
    detrand::fill_standard_normal(&mut buf, seed);
    Tensor::from_vec(shape, buf.iter().map(|&v| v as f32).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let x = random_tensor(&[8, 16, 32, 32], 1);
    let k = random_tensor(&[32, 16, 3, 3], 2);
    let y = conv2d_forward(&x, &k, 1, 1).unwrap();
    let g = random_tensor(&y.shape, 3);

    let mut group = c.benchmark_group("conv2d_forward");
    group.bench_function("parallel", |b| {
        b.iter(|| conv2d_forward(&x, &k, 1, 1).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| run_sequential(|| conv2d_forward(&x, &k, 1, 1).unwrap()))
    });
    group.finish();

    let mut group = c.benchmark_group("conv2d_backward");
    group.bench_function("parallel", |b| {
        b.iter(|| conv2d_backward(&x, &k, &g, 1, 1).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| run_sequential(|| conv2d_backward(&x, &k, &g, 1, 1).unwrap()))
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let cfg_model = micro_res_net((3, 32, 32), 10, 8, true);
    let net: Network<f32> = Network::build(
        cfg_model,
        Grouping::Global,
        RingSizing::Fraction(0.25),
        GenMode::BOTH,
        7,
    )
    .unwrap();
    let bundle = data::synthetic(10, 32, 8, (3, 32, 32), 11);
    let idxs: Vec<usize> = (0..32).collect();
    let (x, labels) = bundle.train.batch::<f32>(&idxs);
    let cfg = TrainConfig {
        lr: 0.01,
        lr_milestones: vec![],
        ..TrainConfig::default()
    };

    let mut group = c.benchmark_group("train_step_batch32");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (net.clone(), OptState::new(&net)),
            |(mut n, mut o)| train_step(&mut n, &mut o, &x, &labels, 0.01, &cfg, None).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (net.clone(), OptState::new(&net)),
            |(mut n, mut o)| {
                run_sequential(|| train_step(&mut n, &mut o, &x, &labels, 0.01, &cfg, None))
                    .unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn bench_prop_trials(c: &mut Criterion) {
    let mut group = c.benchmark_group("prop_trials");
    group.sample_size(10);
    group.bench_function("haar_m32_2k/parallel", |b| {
        b.iter(|| verify_props(32, 2000, Ensemble::Haar, 5))
    });
    group.bench_function("haar_m32_2k/sequential", |b| {
        b.iter(|| run_sequential(|| verify_props(32, 2000, Ensemble::Haar, 5)))
    });
    group.bench_function("perm_sign_m64_20k/parallel", |b| {
        b.iter(|| verify_props(64, 20_000, Ensemble::PermSign, 5))
    });
    group.bench_function("perm_sign_m64_20k/sequential", |b| {
        b.iter(|| run_sequential(|| verify_props(64, 20_000, Ensemble::PermSign, 5)))
    });
    group.finish();
}

fn bench_kernel_generation(c: &mut Criterion) {
    let cfg_model = micro_res_net((3, 32, 32), 10, 16, true);
    let net: Network<f32> = Network::build(
        cfg_model,
        Grouping::Global,
        RingSizing::Fraction(0.5),
        GenMode::BOTH,
        9,
    )
    .unwrap();
    let nodes: Vec<usize> = (0..net.config.nodes.len())
        .filter(|&n| net.config.nodes[n].generated)
        .collect();

    let mut group = c.benchmark_group("generate_all_kernels");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            rpg_core::par::map_collect(nodes.len(), |i| {
                net.generate_node_kernel(nodes[i]).unwrap().data.len()
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            run_sequential(|| {
                rpg_core::par::map_collect(nodes.len(), |i| {
                    net.generate_node_kernel(nodes[i]).unwrap().data.len()
                })
            })
        })
    });
    group.finish();
}

fn config() -> Criterion {
    Criterion::default()
        .measurement_time(Duration::from_secs(4))
        .warm_up_time(Duration::from_secs(1))
}

criterion_group! {
    name = benches;
    config = config();
    targets = bench_conv, bench_train_step, bench_prop_trials, bench_kernel_generation
}
criterion_main!(benches);
