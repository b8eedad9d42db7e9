use std::hint::black_box;

use amalgam_core::learned::{ndim_one_hot, policy_step_value, Policy, RnnProp, StepContext};
use amalgam_core::optimizee::{loss_and_grad, make_cnn, make_mlp, synth_classification, Family, Optimizee, ProblemSpec};
use amalgam_core::pool::{pool_update, OptimizerState, PoolKind, PoolMember};
use amalgam_core::stability::{optimization_stability, variance_components};
use amalgam_core::trainer::unroll_meta_loss;
use amalgam_core::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect()
}

fn tape_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("tape_matmul_backward");
    for n in [16, 64, 128] {
        let a = Tensor::matrix(n, n, ramp(n * n)).unwrap();
        let b = Tensor::matrix(n, n, ramp(n * n + 3)[3..].to_vec()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let p = tape.matmul(x, y).unwrap();
                let t = tape.tanh(p).unwrap();
                let s = tape.sum(t).unwrap();
                black_box(tape.backward(s).unwrap().wrt(x))
            })
        });
    }
    group.finish();
}

fn pool_updates(c: &mut Criterion) {
    let grad = Tensor::vector(ramp(10_000));
    let mut group = c.benchmark_group("pool_update_10k");
    for kind in PoolKind::ALL {
        let member = PoolMember::new(kind, 0.01);
        let state = OptimizerState::zeros(&[10_000]);
        group.bench_function(kind.name(), |bench| bench.iter(|| black_box(pool_update(&member, &grad, &state).unwrap())));
    }
    group.finish();
}

fn rnnprop_step(c: &mut Criterion) {
    let mlp = make_mlp(20, 8, 4).unwrap();
    let layout = mlp.layout();
    let policy = RnnProp::default();
    let params = policy.init_params(1);
    let state = policy.initial_state(layout);
    let one_hot = ndim_one_hot(layout).unwrap();
    let grad = Tensor::vector(ramp(layout.total()));
    let ctx = StepContext {
        step: 1,
        ndim_one_hot: &one_hot,
    };
    c.bench_function("rnnprop_step_264_coords", |bench| {
        bench.iter(|| black_box(policy_step_value(&policy, &params, &grad, &state, &ctx).unwrap()))
    });
}

fn optimizee_grads(c: &mut Criterion) {
    let data = synth_classification(64, 784, 10, 2.0, 3).unwrap().with_batch_size(32);
    let batch = data.train.batch(&(0..32).collect::<Vec<_>>());
    let mlp = make_mlp(20, 784, 10).unwrap();
    let theta = mlp.init(0);
    c.bench_function("mlp_784_20_10_grad_batch32", |bench| {
        bench.iter(|| black_box(loss_and_grad(&mlp, &theta, &batch).unwrap()))
    });
    let cnn = make_cnn([16, 32]).unwrap();
    let theta = cnn.init(0);
    let small = data.train.batch(&[0, 1]);
    c.bench_function("cnn_16_32_grad_batch2", |bench| {
        bench.iter(|| black_box(loss_and_grad(&cnn, &theta, &small).unwrap()))
    });
}

fn truncation(c: &mut Criterion) {
    let family = Family::new(
        ProblemSpec::Blobs {
            hidden: 20,
            dim: 8,
            classes: 4,
            samples: 1000,
            separation: 2.0,
            batch: 32,
            data_seed: 7,
        },
        None,
    )
    .unwrap();
    let problem = family.instance(1).unwrap();
    let theta0 = problem.init(1);
    let batches = problem.sample_batches(20, 0);
    let policy = RnnProp::default();
    let params = policy.init_params(1);
    let mut group = c.benchmark_group("meta_gradient");
    group.sample_size(10);
    group.bench_function("rnnprop_truncation_20_steps", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let phi = params.leaves(&mut tape);
            let loss = unroll_meta_loss(&mut tape, &policy, &phi, &problem, &theta0, &batches).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    group.finish();
}

fn stability(c: &mut Criterion) {
    let groups: Vec<Vec<f64>> = (0..8).map(|i| ramp(10 + i)[i..].to_vec()).collect();
    c.bench_function("variance_components_8x10", |bench| bench.iter(|| black_box(variance_components(&groups).unwrap())));
    let curve = ramp(1000);
    c.bench_function("optimization_stability_1000", |bench| {
        bench.iter(|| black_box(optimization_stability(&curve).unwrap()))
    });
}

criterion_group!(benches, tape_matmul, pool_updates, rnnprop_step, optimizee_grads, truncation, stability);
criterion_main!(benches);
