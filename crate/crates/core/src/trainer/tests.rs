use super::*;
use crate::gradcheck::grad_check;
use crate::learned::{RnnProp, NDIM_BINS};
use crate::optimizee::{make_quadratic, DataFeed, ProblemSpec};
use approx::assert_abs_diff_eq;

fn quadratic_family() -> Family {
    Family::new(
        ProblemSpec::Quadratic {
            dim: 3,
            conditioning: 10.0,
        },
        None,
    )
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        truncation: 5,
        stages: vec![10],
        meta_epochs: 4,
        validation_interval: 2,
        validation_seeds: 1,
        warmup_steps: 3,
        ..TrainConfig::default()
    }
}

fn epoch_data(problem: &Problem, steps: usize, scale: Option<Tensor>) -> EpochData<'_> {
    let theta0 = problem.init(1);
    let batches = problem.sample_batches(steps, 0);
    let initial_losses = batches
        .iter()
        .map(|b| loss_value(problem.optimizee.as_ref(), &theta0, b).unwrap())
        .collect();
    EpochData {
        problem,
        batches,
        initial_losses,
        scale,
        one_hot: crate::learned::ndim_one_hot(problem.layout()).unwrap(),
        noise_seed: 0,
        input_noise: None,
    }
}

fn start(policy: &dyn Policy, problem: &Problem) -> Carry {
    Carry {
        theta: problem.init(1),
        state: policy.initial_state(problem.layout()),
        step: 0,
    }
}

#[test]
fn sgd_teacher_takes_one_plain_step() {
    let problem = Problem::new(Arc::new(make_quadratic(1, 1.0, 0).unwrap()), DataFeed::FullBatch);
    let data = epoch_data(&problem, 1, None);
    let teacher = Teacher::pool(PoolMember::new(PoolKind::Sgd, 0.1));
    let carry = Carry {
        theta: Tensor::vector(vec![1.0]),
        state: teacher.policy.initial_state(problem.layout()),
        step: 0,
    };
    let (thetas, _) = value_truncation(teacher.policy.as_ref(), &teacher.params, &data, &carry, 0..1).unwrap();
    assert_abs_diff_eq!(thetas[0].item(), 0.9, epsilon = 1e-15);
}

#[test]
fn cutting_the_graph_keeps_the_trajectory() {
    let policy = RnnProp { out_init: 0.2 };
    let phi = policy.init_params(3);
    let problem = quadratic_family().instance(4).unwrap();
    let data = epoch_data(&problem, 8, None);
    let carry = start(&policy, &problem);
    let whole = student_truncation(&policy, &phi, &data, &carry, 0..8, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    let first = student_truncation(&policy, &phi, &data, &carry, 0..4, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    let second =
        student_truncation(&policy, &phi, &data, &first.carry, 4..8, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    let pieces: Vec<Tensor> = first.thetas.iter().chain(&second.thetas).cloned().collect();
    assert_eq!(pieces, whole.thetas);
    assert_eq!(second.carry, whole.carry);
    assert_eq!(first.carry.theta, first.thetas[3]);
}

#[test]
fn teacher_snapshots_do_not_enter_the_meta_gradient() {
    let policy = RnnProp { out_init: 0.2 };
    let phi = policy.init_params(5);
    let problem = quadratic_family().instance(2).unwrap();
    let data = epoch_data(&problem, 4, None);
    let carry = start(&policy, &problem);
    let a = vec![vec![Tensor::vector(vec![0.1, 0.2, 0.3]); 4]];
    let b = vec![vec![Tensor::vector(vec![-5.0, 4.0, 1.0]); 4]];
    let ra = student_truncation(&policy, &phi, &data, &carry, 0..4, AmalgamationKind::Mean, &a, 0.0).unwrap();
    let rb = student_truncation(&policy, &phi, &data, &carry, 0..4, AmalgamationKind::Mean, &b, 0.0).unwrap();
    assert_eq!(ra.grads, rb.grads);
    // with distillation the gradient moves, but the meta part is unchanged
    let da = student_truncation(&policy, &phi, &data, &carry, 0..4, AmalgamationKind::Mean, &a, 1.0).unwrap();
    let db = student_truncation(&policy, &phi, &data, &carry, 0..4, AmalgamationKind::Mean, &b, 1.0).unwrap();
    assert_ne!(da.grads, db.grads);
    assert_eq!(da.meta, db.meta);
}

#[test]
fn unit_scales_change_nothing() {
    let policy = RnnProp { out_init: 0.2 };
    let phi = policy.init_params(0);
    let problem = quadratic_family().instance(1).unwrap();
    let carry = start(&policy, &problem);
    let plain = epoch_data(&problem, 5, None);
    let ones = epoch_data(&problem, 5, Some(Tensor::ones(&[3])));
    let a = student_truncation(&policy, &phi, &plain, &carry, 0..5, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    let b = student_truncation(&policy, &phi, &ones, &carry, 0..5, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    assert_eq!(a.thetas, b.thetas);
}

#[test]
fn sgd_student_cancels_random_scales() {
    let policy = PoolPolicy(PoolMember::new(PoolKind::Sgd, 0.05));
    let phi = ParamSet::new();
    let problem = quadratic_family().instance(1).unwrap();
    let carry = start(&policy, &problem);
    let plain = epoch_data(&problem, 6, None);
    let s = random_scales(&problem, 1.0, 77);
    assert!(s.data().iter().all(|&x| (-1.0..=1.0).contains(&x.ln())));
    let scaled = epoch_data(&problem, 6, Some(s));
    let a = student_truncation(&policy, &phi, &plain, &carry, 0..6, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    let b = student_truncation(&policy, &phi, &scaled, &carry, 0..6, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    for (x, y) in a.thetas.iter().zip(&b.thetas) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() <= 1e-14 * p.abs().max(1.0), "{p} vs {q}");
        }
    }
}

#[test]
fn scales_stay_within_bounds() {
    let problem = Family::new(
        ProblemSpec::Blobs {
            hidden: 3,
            dim: 2,
            classes: 2,
            samples: 20,
            separation: 1.0,
            batch: 4,
            data_seed: 0,
        },
        None,
    )
    .unwrap()
    .instance(0)
    .unwrap();
    for seed in 0..50 {
        let s = random_scales(&problem, 1.0, seed);
        assert!(s.data().iter().all(|&x| (1.0 / std::f64::consts::E..=std::f64::consts::E).contains(&x)));
        // constant within each tensor
        assert!(s.data()[..6].iter().all(|&x| x == s.data()[0]));
    }
}

#[test]
fn identical_members_give_no_head_gradient() {
    let member = PoolMember::new(PoolKind::Adam, 0.05);
    let policy = ChoicePolicy::new(vec![member, member]).unwrap();
    let mut phi = policy.init_params(2);
    phi.get_mut("head.w").unwrap().data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.01 * i as f64);
    let problem = quadratic_family().instance(3).unwrap();
    let data = epoch_data(&problem, 5, None);
    let carry = start(&policy, &problem);
    let r = student_truncation(&policy, &phi, &data, &carry, 0..5, AmalgamationKind::MetaOnly, &[], 0.0).unwrap();
    for name in ["head.w", "head.b", "lstm1.wx", "lstm2.wh"] {
        let g = &r.grads[phi.index_of(name).unwrap()];
        assert!(g.max_abs() < 1e-15, "{name}: {}", g.max_abs());
    }
}

#[test]
fn rnnprop_meta_gradient_matches_finite_differences() {
    let policy = RnnProp { out_init: 0.2 };
    let phi = policy.init_params(9);
    let problem = quadratic_family().instance(6).unwrap();
    let theta0 = problem.init(6);
    let batches = problem.sample_batches(5, 0);
    let err = grad_check(
        |tape, flat| {
            let vars = phi.views(tape, flat)?;
            unroll_meta_loss(tape, &policy, &vars, &problem, &theta0, &batches)
        },
        &Tensor::vector(phi.flatten()),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn one_truncation_gives_one_meta_update() {
    let policy = RnnProp::default();
    let family = quadratic_family();
    let config = TrainConfig {
        stages: vec![5],
        ..small_config()
    };
    let mode = AmalgamationMode::meta_only();
    let perturbation = PerturbationConfig::default();
    let trainer = MetaTrainer {
        policy: &policy,
        mode: &mode,
        family: &family,
        config: &config,
        perturbation: &perturbation,
    };
    let phi = policy.init_params(0);
    let mut opt = MetaOptimizer::new(&phi, config.meta_lr, config.grad_clip);
    let out = trainer.epoch(phi.clone(), &mut opt, 0, 5).unwrap();
    assert!(!out.diverged);
    assert!(opt.states.iter().all(|s| s.step == 1));
    assert_ne!(out.params, phi);
}

#[test]
fn zero_sigma_gaussian_matches_unperturbed_training() {
    let policy = RnnProp::default();
    let family = quadratic_family();
    let config = small_config();
    let mode = AmalgamationMode::new(
        AmalgamationKind::Mean,
        vec![Teacher::pool(PoolMember::new(PoolKind::Adam, 0.05))],
    )
    .unwrap();
    let init = policy.init_params(1);
    let a = train_truncated(&policy, init.clone(), &mode, &family, &config, &PerturbationConfig::default()).unwrap();
    let b = train_truncated(&policy, init, &mode, &family, &config, &PerturbationConfig::gaussian(0.0)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.len(), 4);
    assert!(a.log[1].validation_meta_loss.is_some() && a.log[0].validation_meta_loss.is_none());
}

#[test]
fn perturbations_leave_training_finite() {
    let policy = RnnProp::default();
    let family = quadratic_family();
    let config = small_config();
    let mode = AmalgamationMode::new(
        AmalgamationKind::MinMax,
        vec![
            Teacher::pool(PoolMember::new(PoolKind::Adam, 0.05)),
            Teacher::pool(PoolMember::new(PoolKind::RmsProp, 0.02)),
        ],
    )
    .unwrap();
    for p in [
        PerturbationConfig::gaussian(1e-2),
        PerturbationConfig::adversarial(1e-2, 2),
        PerturbationConfig::input(0.1),
    ] {
        let out = train_truncated(&policy, policy.init_params(1), &mode, &family, &config, &p).unwrap();
        assert!(out.params.all_finite(), "{p:?}");
        assert!(out.log.iter().all(|r| r.diverged || r.train_loss.is_finite()));
    }
}

#[test]
fn mode_validation() {
    let t = Teacher::pool(PoolMember::new(PoolKind::Adam, 0.01));
    assert!(AmalgamationMode::new(AmalgamationKind::OptimalChoice, vec![t.clone(), t.clone()]).is_err());
    assert!(AmalgamationMode::new(AmalgamationKind::Mean, vec![]).is_err());
    assert!(AmalgamationMode::new(AmalgamationKind::OptimalChoice, vec![t]).is_ok());
    let bad = TrainConfig {
        truncation: 30,
        stages: vec![100],
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(NDIM_BINS, 5);
}
