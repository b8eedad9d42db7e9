use amalgam_core::perturbation::input_perturb;
use amalgam_core::pool::{pool_update, OptimizerState, PoolKind, PoolMember};
use amalgam_core::seed::derive_named;
use amalgam_core::stability::{gaussian_kernel, optimization_stability, variance_components, SMOOTHING_SIGMA, SMOOTHING_TRUNCATE};
use amalgam_core::{Tape, Tensor};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn curve() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 5..60)
}

fn grid() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 2usize..6).prop_flat_map(|(k, n)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), k))
}

fn gradient() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..20)
}

proptest! {
    #[test]
    fn residual_sd_ignores_shifts(c in curve(), shift in -1e3f64..1e3) {
        let base = optimization_stability(&c).unwrap();
        let moved: Vec<f64> = c.iter().map(|x| x + shift).collect();
        prop_assert!(close(optimization_stability(&moved).unwrap(), base, 1e-9));
    }

    #[test]
    fn residual_sd_scales_linearly(c in curve(), s in -20.0f64..20.0) {
        let base = optimization_stability(&c).unwrap();
        let scaled: Vec<f64> = c.iter().map(|x| x * s).collect();
        prop_assert!(close(optimization_stability(&scaled).unwrap(), s.abs() * base, 1e-9));
    }

    #[test]
    fn anova_components_are_shift_invariant(g in grid(), shift in -100.0f64..100.0) {
        let a = variance_components(&g).unwrap();
        let moved: Vec<Vec<f64>> = g.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
        let b = variance_components(&moved).unwrap();
        prop_assert!(close(b.mu, a.mu + shift, 1e-9));
        prop_assert!(close(b.var_alpha, a.var_alpha, 1e-7));
        prop_assert!(close(b.var_eps, a.var_eps, 1e-7));
        prop_assert!(a.var_alpha >= 0.0 && a.var_eps >= 0.0);
        prop_assert!(a.mu_ci.0 <= a.mu && a.mu <= a.mu_ci.1);
    }

    #[test]
    fn anova_ignores_group_order(mut g in grid()) {
        let a = variance_components(&g).unwrap();
        g.reverse();
        let b = variance_components(&g).unwrap();
        prop_assert!(close(a.var_alpha, b.var_alpha, 1e-9));
        prop_assert!(close(a.var_eps, b.var_eps, 1e-9));
    }

    #[test]
    fn sgd_step_is_lr_times_gradient(g in gradient(), lr in 1e-4f64..1.0) {
        let grad = Tensor::vector(g.clone());
        let state = OptimizerState::zeros(grad.shape());
        let (update, next) = pool_update(&PoolMember::new(PoolKind::Sgd, lr), &grad, &state).unwrap();
        prop_assert_eq!(next.step, 1);
        for (u, x) in update.data().iter().zip(&g) {
            prop_assert!(close(*u, lr * x, 1e-12));
        }
    }

    #[test]
    fn adam_first_step_is_bounded_by_lr(g in gradient(), lr in 1e-4f64..1.0) {
        let grad = Tensor::vector(g.clone());
        let state = OptimizerState::zeros(grad.shape());
        let (update, _) = pool_update(&PoolMember::new(PoolKind::Adam, lr), &grad, &state).unwrap();
        for (u, x) in update.data().iter().zip(&g) {
            prop_assert!(u.abs() <= lr * (1.0 + 1e-9));
            prop_assert!(*x == 0.0 || u.signum() == x.signum());
        }
    }

    #[test]
    fn every_member_stays_finite(g in gradient(), steps in 1usize..20) {
        let grad = Tensor::vector(g);
        for kind in PoolKind::ALL {
            let member = PoolMember::new(kind, 0.1);
            let mut state = OptimizerState::zeros(grad.shape());
            for _ in 0..steps {
                let (update, next) = pool_update(&member, &grad, &state).unwrap();
                prop_assert!(update.all_finite(), "{} diverged", kind.name());
                state = next;
            }
        }
    }

    #[test]
    fn square_gradient_is_twice_input(x in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(x.clone()));
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap().wrt(v);
        for (d, xi) in grads.data().iter().zip(&x) {
            prop_assert!(close(*d, 2.0 * xi, 1e-12));
        }
    }

    #[test]
    fn seeds_are_pure_and_label_separated(seed in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(derive_named(seed, "eval", i), derive_named(seed, "eval", i));
        prop_assert_ne!(derive_named(seed, "eval", i), derive_named(seed, "replicate", i));
        prop_assert_ne!(derive_named(seed, "eval", i), derive_named(seed, "eval", i + 1));
    }

    #[test]
    fn input_noise_is_seeded(g in gradient(), sigma in 0.0f64..2.0, s in any::<u64>()) {
        let grad = Tensor::vector(g);
        let a = input_perturb(&grad, sigma, s).unwrap();
        prop_assert_eq!(&a, &input_perturb(&grad, sigma, s).unwrap());
        if sigma == 0.0 {
            prop_assert_eq!(&a, &grad);
        }
    }
}

#[test]
fn smoothing_kernel_is_normalized_and_symmetric() {
    let w = gaussian_kernel(SMOOTHING_SIGMA, SMOOTHING_TRUNCATE);
    assert_eq!(w.len() % 2, 1);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.iter().zip(w.iter().rev()).all(|(a, b)| a == b));
}
