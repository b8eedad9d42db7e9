//! Analytical teacher optimizers.
//!
//! All six rules share Adam-style bias-corrected moments and can be recorded
//! on a [`Tape`], so a teacher's update is differentiable with respect to the
//! gradient it consumes. AddSign and PowerSign replace `sign(m) sign(g)` by
//! `tanh(m / sqrt(v)) tanh(g / sqrt(v))`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stabilizer added under every `sqrt(v)` denominator.
pub const DEFAULT_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Sgd,
    Momentum,
    RmsProp,
    Adam,
    AddSign,
    PowerSign,
}

impl PoolKind {
    pub const ALL: [PoolKind; 6] = [
        PoolKind::Adam,
        PoolKind::RmsProp,
        PoolKind::Sgd,
        PoolKind::Momentum,
        PoolKind::AddSign,
        PoolKind::PowerSign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Sgd => "sgd",
            PoolKind::Momentum => "momentum",
            PoolKind::RmsProp => "rmsprop",
            PoolKind::Adam => "adam",
            PoolKind::AddSign => "addsign",
            PoolKind::PowerSign => "powersign",
        }
    }

    /// The "small" pool.
    pub fn small() -> Vec<PoolKind> {
        vec![PoolKind::Adam, PoolKind::RmsProp]
    }

    /// The "large" pool.
    pub fn large() -> Vec<PoolKind> {
        Self::ALL.to_vec()
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown optimizer `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolHyperparams {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for PoolHyperparams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            lr: 1e-3,
            eps: DEFAULT_EPS,
        }
    }
}

impl PoolHyperparams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr > 0.0
            && self.eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid pool hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolMember {
    pub kind: PoolKind,
    pub hyper: PoolHyperparams,
}

impl PoolMember {
    pub fn new(kind: PoolKind, lr: f64) -> Self {
        Self {
            kind,
            hyper: PoolHyperparams::with_lr(lr),
        }
    }
}

/// Moment accumulators of one pool member. `m` and `v` hold the raw EMAs;
/// bias correction is applied when the update is formed.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Moment accumulators recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapedMoments {
    pub m: Var,
    pub v: Var,
}

/// `sqrt(v + eps)`, the stabilized normalizer shared by every rule.
pub fn stabilized_root(tape: &mut Tape, v_hat: Var, eps: f64) -> Result<Var> {
    let shifted = tape.add_const(v_hat, eps)?;
    tape.sqrt(shifted)
}

/// `tanh(m / sqrt(v + eps)) * tanh(g / sqrt(v + eps))`.
pub fn soft_sign_agreement_taped(tape: &mut Tape, m_hat: Var, g: Var, v_hat: Var, eps: f64) -> Result<Var> {
    let denom = stabilized_root(tape, v_hat, eps)?;
    let a = tape.div(m_hat, denom)?;
    let a = tape.tanh(a)?;
    let b = tape.div(g, denom)?;
    let b = tape.tanh(b)?;
    tape.mul(a, b)
}

/// Value form of [`soft_sign_agreement_taped`] with the default stabilizer.
pub fn soft_sign_agreement(m_hat: &Tensor, g: &Tensor, v_hat: &Tensor) -> Result<Tensor> {
    if m_hat.shape() != g.shape() || g.shape() != v_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_sign_agreement",
            lhs: m_hat.shape().to_vec(),
            rhs: v_hat.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let (m, gv, v) = (tape.leaf(m_hat.clone()), tape.leaf(g.clone()), tape.leaf(v_hat.clone()));
    let out = soft_sign_agreement_taped(&mut tape, m, gv, v, DEFAULT_EPS)?;
    Ok(tape.value(out).clone())
}

/// `lr * rule(g, m_hat, v_hat)` for already bias-corrected moments.
pub fn apply_rule(tape: &mut Tape, member: &PoolMember, g: Var, m_hat: Var, v_hat: Var) -> Result<Var> {
    let h = &member.hyper;
    let direction = match member.kind {
        PoolKind::Sgd => g,
        PoolKind::Momentum => m_hat,
        PoolKind::RmsProp | PoolKind::Adam => {
            let denom = stabilized_root(tape, v_hat, h.eps)?;
            let num = if member.kind == PoolKind::Adam { m_hat } else { g };
            tape.div(num, denom)?
        }
        PoolKind::AddSign => {
            let agree = soft_sign_agreement_taped(tape, m_hat, g, v_hat, h.eps)?;
            let factor = tape.add_const(agree, 1.0)?;
            tape.mul(g, factor)?
        }
        PoolKind::PowerSign => {
            let agree = soft_sign_agreement_taped(tape, m_hat, g, v_hat, h.eps)?;
            let factor = tape.exp(agree)?;
            tape.mul(g, factor)?
        }
    };
    tape.scale(direction, h.lr)
}

/// One update of `member` on the tape. `step` is the step count after this
/// update (starting at 1) and drives bias correction.
pub fn pool_update_taped(
    tape: &mut Tape,
    member: &PoolMember,
    grad: Var,
    moments: TapedMoments,
    step: u64,
) -> Result<(Var, TapedMoments)> {
    let h = &member.hyper;
    let gm = tape.scale(grad, 1.0 - h.beta1)?;
    let mm = tape.scale(moments.m, h.beta1)?;
    let m = tape.add(mm, gm)?;
    let g2 = tape.square(grad)?;
    let g2 = tape.scale(g2, 1.0 - h.beta2)?;
    let vv = tape.scale(moments.v, h.beta2)?;
    let v = tape.add(vv, g2)?;
    let t = step as i32;
    let m_hat = tape.scale(m, 1.0 / (1.0 - h.beta1.powi(t)))?;
    let v_hat = tape.scale(v, 1.0 / (1.0 - h.beta2.powi(t)))?;
    let update = apply_rule(tape, member, grad, m_hat, v_hat)?;
    Ok((update, TapedMoments { m, v }))
}

/// Pure value-level update: returns `(update, state')` where the caller
/// applies `theta - update`.
pub fn pool_update(member: &PoolMember, grad: &Tensor, state: &OptimizerState) -> Result<(Tensor, OptimizerState)> {
    if grad.shape() != state.m.shape() || grad.shape() != state.v.shape() {
        return Err(Error::ShapeMismatch {
            op: "pool_update",
            lhs: grad.shape().to_vec(),
            rhs: state.m.shape().to_vec(),
        });
    }
    if !grad.all_finite() {
        return Err(Error::Divergence(format!("{} received a non-finite gradient", member.kind)));
    }
    let mut tape = Tape::new();
    let g = tape.leaf(grad.clone());
    let moments = TapedMoments {
        m: tape.leaf(state.m.clone()),
        v: tape.leaf(state.v.clone()),
    };
    let step = state.step + 1;
    let (update, next) = pool_update_taped(&mut tape, member, g, moments, step)?;
    Ok((
        tape.value(update).clone(),
        OptimizerState {
            m: tape.value(next.m).clone(),
            v: tape.value(next.v).clone(),
            step,
        },
    ))
}

/// The 5-10-20 per-decade learning-rate grid from `5e-4` up to `1`.
pub fn default_lr_grid() -> Vec<f64> {
    let mut grid = vec![5e-4];
    let mut decade = 1e-3;
    while decade < 1.0 {
        for m in [1.0, 2.0, 5.0] {
            grid.push(m * decade);
        }
        decade *= 10.0;
    }
    grid.push(1.0);
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn sgd_is_lr_times_gradient() {
        let member = PoolMember::new(PoolKind::Sgd, 0.3);
        let g = v(&[1.0, -2.0, 0.5]);
        let (u, s) = pool_update(&member, &g, &OptimizerState::zeros(&[3])).unwrap();
        assert_eq!(u.data(), &[0.3, -0.6, 0.15]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let member = PoolMember::new(PoolKind::Adam, 0.01);
        let (u, _) = pool_update(&member, &v(&[1.0, -3.0]), &OptimizerState::zeros(&[2])).unwrap();
        assert_abs_diff_eq!(u.data()[0], 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(u.data()[1], -0.01, epsilon = 1e-12);
    }

    #[test]
    fn sign_rules_reduce_to_sgd_at_zero_momentum() {
        for kind in [PoolKind::AddSign, PoolKind::PowerSign] {
            let member = PoolMember::new(kind, 0.05);
            let mut tape = Tape::new();
            let g = tape.leaf(v(&[0.7, -1.3, 2.0]));
            let m = tape.leaf(Tensor::zeros(&[3]));
            let vh = tape.leaf(v(&[0.4, 1.0, 3.0]));
            let u = apply_rule(&mut tape, &member, g, m, vh).unwrap();
            for (a, b) in tape.value(u).data().iter().zip([0.7, -1.3, 2.0]) {
                assert_eq!(*a, 0.05 * b);
            }
        }
    }

    #[test]
    fn sign_rules_reduce_to_sgd_when_ema_cancels() {
        // choose m_prev so that beta1 m_prev + (1 - beta1) g == 0
        let g = v(&[0.8, -0.4]);
        let state = OptimizerState {
            m: g.map(|x| -x * 0.1 / 0.9),
            v: v(&[0.5, 0.5]),
            step: 3,
        };
        let member = PoolMember::new(PoolKind::AddSign, 0.1);
        let (u, s) = pool_update(&member, &g, &state).unwrap();
        assert!(s.m.max_abs() < 1e-16);
        assert_abs_diff_eq!(u.data()[0], 0.08, epsilon = 1e-15);
        assert_abs_diff_eq!(u.data()[1], -0.04, epsilon = 1e-15);
    }

    #[test]
    fn soft_agreement_examples() {
        let zero = soft_sign_agreement(&v(&[0.0, 0.0]), &v(&[1.0, -5.0]), &v(&[1.0, 2.0])).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        let sat = soft_sign_agreement(&v(&[10.0]), &v(&[10.0]), &v(&[1.0])).unwrap();
        assert!(sat.data()[0] > 0.999_999 && sat.data()[0] < 1.0);
        assert!(soft_sign_agreement(&v(&[1.0]), &v(&[1.0, 2.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn momentum_is_bias_corrected_ema() {
        let member = PoolMember::new(PoolKind::Momentum, 1.0);
        let mut state = OptimizerState::zeros(&[1]);
        let mut m = 0.0;
        for (i, g) in [1.0, 2.0, -1.0, 0.5].into_iter().enumerate() {
            let (u, s) = pool_update(&member, &v(&[g]), &state).unwrap();
            m = 0.9 * m + 0.1 * g;
            let expected = m / (1.0 - 0.9f64.powi(i as i32 + 1));
            assert_abs_diff_eq!(u.data()[0], expected, epsilon = 1e-12);
            state = s;
        }
    }

    #[test]
    fn zero_gradient_from_zero_state_is_finite() {
        for kind in PoolKind::ALL {
            let (u, _) = pool_update(&PoolMember::new(kind, 0.1), &v(&[0.0]), &OptimizerState::zeros(&[1])).unwrap();
            assert_eq!(u.data(), &[0.0], "{kind}");
        }
    }

    #[test]
    fn non_finite_gradient_signals_divergence() {
        let r = pool_update(&PoolMember::new(PoolKind::Adam, 0.1), &v(&[f64::NAN]), &OptimizerState::zeros(&[1]));
        assert!(matches!(r, Err(Error::Divergence(_))));
    }

    #[test]
    fn updates_are_differentiable_in_the_gradient() {
        let m_prev = v(&[0.3, -0.2, 0.05]);
        let v_prev = v(&[0.2, 0.1, 0.3]);
        for kind in PoolKind::ALL {
            let member = PoolMember::new(kind, 0.1);
            let err = grad_check(
                |tape, g| {
                    let moments = TapedMoments {
                        m: tape.leaf(m_prev.clone()),
                        v: tape.leaf(v_prev.clone()),
                    };
                    let (u, _) = pool_update_taped(tape, &member, g, moments, 4)?;
                    let w = tape.leaf(v(&[1.0, -2.0, 0.5]));
                    let p = tape.mul(u, w)?;
                    tape.sum(p)
                },
                &v(&[0.4, -0.7, 0.9]),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind}: {err}");
        }
    }

    #[test]
    fn grid_follows_per_decade_pattern() {
        let grid = default_lr_grid();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid[0], 5e-4);
        assert_abs_diff_eq!(grid[1], 1e-3);
        assert_abs_diff_eq!(grid[2], 2e-3);
        assert_eq!(*grid.last().unwrap(), 1.0);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn kinds_parse_from_names() {
        for kind in PoolKind::ALL {
            assert_eq!(kind.name().parse::<PoolKind>().unwrap(), kind);
        }
        assert!("lion".parse::<PoolKind>().is_err());
    }
}
