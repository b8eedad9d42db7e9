//! Learned optimizers applied coordinate-wise to the flat optimizee vector.
//!
//! A [`Policy`] maps a gradient and its recurrent state to an update. Every
//! coordinate is one row of the batched recurrent computation, so the same
//! weights act on each parameter independently. Pool members are policies
//! too (with no weights), which lets student and teachers share one rollout.

mod choice;
mod lstm;
mod rnnprop;

use std::fmt;

use crate::error::{Error, Result};
use crate::optimizee::ParamLayout;
use crate::params::ParamSet;
use crate::pool::{pool_update_taped, PoolMember, TapedMoments};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use choice::{choice_forward, ChoiceOutput, ChoicePolicy, NDIM_BINS};
pub use lstm::{lstm_cell, lstm_params, LstmState};
pub use rnnprop::{rnnprop_features, rnnprop_step, CoordState, RnnProp};

/// Hidden width of every recurrent layer.
pub const HIDDEN: usize = 20;

/// Per-step inputs besides the gradient.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// Step count after this update, starting at 1.
    pub step: u64,
    /// One-hot tensor rank per coordinate, `[D, NDIM_BINS]`.
    pub ndim_one_hot: &'a Tensor,
}

/// Output of one policy step on the tape.
#[derive(Debug, Clone)]
pub struct PolicyStep {
    /// Subtracted from the parameters.
    pub update: Var,
    pub state: Vec<Var>,
    /// Simplex weights `[D, K]` for choice policies.
    pub weights: Option<Var>,
}

pub trait Policy: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    /// Seed-deterministic weights.
    fn init_params(&self, seed: u64) -> ParamSet;

    /// Zero recurrent state for an optimizee with `layout`.
    fn initial_state(&self, layout: &ParamLayout) -> Vec<Tensor>;

    /// One step. `phi` are the weights in [`Policy::init_params`] order.
    fn step(&self, tape: &mut Tape, phi: &[Var], grad: Var, state: &[Var], ctx: &StepContext) -> Result<PolicyStep>;
}

/// Value-level policy step: `(update, state', weights)`.
pub fn policy_step_value(
    policy: &dyn Policy,
    params: &ParamSet,
    grad: &Tensor,
    state: &[Tensor],
    ctx: &StepContext,
) -> Result<(Tensor, Vec<Tensor>, Option<Tensor>)> {
    let mut tape = Tape::new();
    let phi = params.leaves(&mut tape);
    let g = tape.leaf(grad.clone());
    let s: Vec<Var> = state.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = policy.step(&mut tape, &phi, g, &s, ctx)?;
    let update = tape.value(out.update).clone();
    if !update.all_finite() {
        return Err(Error::Divergence(format!("{} produced a non-finite update", policy.name())));
    }
    Ok((
        update,
        out.state.iter().map(|&v| tape.value(v).clone()).collect(),
        out.weights.map(|w| tape.value(w).clone()),
    ))
}

/// One-hot encoding of each coordinate's tensor rank.
pub fn ndim_one_hot(layout: &ParamLayout) -> Result<Tensor> {
    one_hot_ranks(&layout.ndim_per_coordinate())
}

pub(crate) fn one_hot_ranks(ranks: &[usize]) -> Result<Tensor> {
    let mut data = vec![0.0; ranks.len() * NDIM_BINS];
    for (i, &r) in ranks.iter().enumerate() {
        if r >= NDIM_BINS {
            return Err(Error::InvalidArgument(format!("tensor rank {r} exceeds the one-hot range 0..{NDIM_BINS}")));
        }
        data[i * NDIM_BINS + r] = 1.0;
    }
    Tensor::matrix(ranks.len(), NDIM_BINS, data)
}

/// An analytical pool member seen as a weightless policy with state `[m, v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolPolicy(pub PoolMember);

impl Policy for PoolPolicy {
    fn name(&self) -> String {
        format!("{}@{}", self.0.kind, self.0.hyper.lr)
    }

    fn init_params(&self, _seed: u64) -> ParamSet {
        ParamSet::new()
    }

    fn initial_state(&self, layout: &ParamLayout) -> Vec<Tensor> {
        vec![Tensor::zeros(&[layout.total()]); 2]
    }

    fn step(&self, tape: &mut Tape, _phi: &[Var], grad: Var, state: &[Var], ctx: &StepContext) -> Result<PolicyStep> {
        let moments = TapedMoments {
            m: state[0],
            v: state[1],
        };
        let (update, next) = pool_update_taped(tape, &self.0, grad, moments, ctx.step)?;
        Ok(PolicyStep {
            update,
            state: vec![next.m, next.v],
            weights: None,
        })
    }
}
