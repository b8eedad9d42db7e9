use super::lstm::{lstm_cell, lstm_params, LstmState};
use super::{one_hot_ranks, Policy, PolicyStep, StepContext, HIDDEN};
use crate::error::{Error, Result};
use crate::optimizee::ParamLayout;
use crate::params::ParamSet;
use crate::pool::{pool_update_taped, PoolMember, TapedMoments};
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Width of the tensor-rank one-hot input (ranks 0 to 4).
pub const NDIM_BINS: usize = 5;

/// Soft choice over pool members: a coordinate-wise LSTM reads the members'
/// updates, the step and the tensor rank, and a softmax head weighs the
/// updates. The head starts at zero, i.e. at the uniform mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoicePolicy {
    pub pool: Vec<PoolMember>,
}

/// Simplex weights `[D, K]`, one row per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceOutput {
    pub weights: Tensor,
}

impl ChoiceOutput {
    /// Mean weight of each member over coordinates.
    pub fn mean_weights(&self) -> Vec<f64> {
        let k = self.weights.shape()[1];
        let rows = self.weights.shape()[0].max(1) as f64;
        (0..k)
            .map(|j| self.weights.data().iter().skip(j).step_by(k).sum::<f64>() / rows)
            .collect()
    }
}

impl ChoicePolicy {
    pub fn new(pool: Vec<PoolMember>) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidArgument("choice policy needs a nonempty pool".into()));
        }
        Ok(Self { pool })
    }

    fn inputs(&self) -> usize {
        self.pool.len() + 1 + NDIM_BINS
    }
}

/// Weights, combined update and next LSTM state from `K` updates of shape `[D]`.
fn core_taped(
    tape: &mut Tape,
    phi: &[Var],
    updates: &[Var],
    step: u64,
    one_hot: Var,
    lstm: [Var; 4],
) -> Result<(Var, Var, [Var; 4])> {
    let d = tape.try_value(updates[0])?.numel();
    let k = updates.len();
    let cols: Vec<Var> = updates
        .iter()
        .map(|&u| tape.reshape(u, &[d, 1]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&cols, 1)?;
    let time = tape.leaf(Tensor::full(&[d, 1], (step as f64 / 100.0).tanh()));
    let x = tape.concat(&[stacked, time, one_hot], 1)?;
    let (h1, c1) = lstm_cell(tape, [phi[0], phi[1], phi[2]], x, lstm[0], lstm[1])?;
    let (h2, c2) = lstm_cell(tape, [phi[3], phi[4], phi[5]], h1, lstm[2], lstm[3])?;
    let logits = tape.affine(h2, phi[6], phi[7])?;
    let weights = tape.softmax_rows(logits)?;
    let weighted = tape.mul(weights, stacked)?;
    let combined = tape.row_sums(weighted)?;
    let combined = tape.reshape(combined, &[d])?;
    debug_assert_eq!(tape.value(weights).shape(), &[d, k]);
    Ok((weights, combined, [h1, c1, h2, c2]))
}

impl Policy for ChoicePolicy {
    fn name(&self) -> String {
        let names: Vec<String> = self.pool.iter().map(|m| m.kind.to_string()).collect();
        format!("choice[{}]", names.join(","))
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = seed::rng(seed);
        let mut entries = lstm_params("lstm1", self.inputs(), HIDDEN, &mut rng);
        entries.extend(lstm_params("lstm2", HIDDEN, HIDDEN, &mut rng));
        let k = self.pool.len();
        entries.push(("head.w".into(), Tensor::zeros(&[HIDDEN, k])));
        entries.push(("head.b".into(), Tensor::zeros(&[k])));
        ParamSet::from_entries(entries).expect("unique names")
    }

    fn initial_state(&self, layout: &ParamLayout) -> Vec<Tensor> {
        let d = layout.total();
        let mut state = vec![Tensor::zeros(&[d]); 2 * self.pool.len()];
        state.extend(std::iter::repeat_n(Tensor::zeros(&[d, HIDDEN]), 4));
        state
    }

    fn step(&self, tape: &mut Tape, phi: &[Var], grad: Var, state: &[Var], ctx: &StepContext) -> Result<PolicyStep> {
        let k = self.pool.len();
        let mut updates = Vec::with_capacity(k);
        let mut next = Vec::with_capacity(state.len());
        for (j, member) in self.pool.iter().enumerate() {
            let moments = TapedMoments {
                m: state[2 * j],
                v: state[2 * j + 1],
            };
            let (u, m) = pool_update_taped(tape, member, grad, moments, ctx.step)?;
            updates.push(u);
            next.extend([m.m, m.v]);
        }
        let one_hot = tape.leaf(ctx.ndim_one_hot.clone());
        let lstm = [state[2 * k], state[2 * k + 1], state[2 * k + 2], state[2 * k + 3]];
        let (weights, combined, lstm) = core_taped(tape, phi, &updates, ctx.step, one_hot, lstm)?;
        next.extend(lstm);
        Ok(PolicyStep {
            update: combined,
            state: next,
            weights: Some(weights),
        })
    }
}

/// Mixes precomputed pool updates (all of one shape, from a tensor of rank
/// `ndim`) with the choice network. `step` starts at 1.
pub fn choice_forward(
    params: &ParamSet,
    pool_updates: &[Tensor],
    step: u64,
    ndim: usize,
    state: &[LstmState; 2],
) -> Result<(ChoiceOutput, Tensor, [LstmState; 2])> {
    let first = pool_updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("choice_forward needs at least one pool update".into()))?;
    if let Some(bad) = pool_updates.iter().find(|u| u.shape() != first.shape()) {
        return Err(Error::ShapeMismatch {
            op: "choice_forward",
            lhs: first.shape().to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    let d = first.numel();
    if state[0].h.shape() != [d, HIDDEN] {
        return Err(Error::ShapeMismatch {
            op: "choice_forward state",
            lhs: state[0].h.shape().to_vec(),
            rhs: vec![d, HIDDEN],
        });
    }
    let mut tape = Tape::new();
    let phi = params.leaves(&mut tape);
    let updates: Vec<Var> = pool_updates
        .iter()
        .map(|u| u.clone().reshape(vec![d]).map(|t| tape.leaf(t)))
        .collect::<Result<_>>()?;
    let one_hot = tape.leaf(one_hot_ranks(&vec![ndim; d])?);
    let lstm = [&state[0].h, &state[0].c, &state[1].h, &state[1].c].map(|t| tape.leaf(t.clone()));
    let (weights, combined, [h1, c1, h2, c2]) = core_taped(&mut tape, &phi, &updates, step, one_hot, lstm)?;
    let value = |v: Var| tape.value(v).clone();
    let next = [
        LstmState { h: value(h1), c: value(c1) },
        LstmState { h: value(h2), c: value(c2) },
    ];
    Ok((
        ChoiceOutput { weights: value(weights) },
        value(combined).reshape(first.shape().to_vec())?,
        next,
    ))
}
