//! Value-level optimization runs: warmup, policy-driven training, and the
//! learning-rate grid search for pool members.

use crate::error::{Error, Result};
use crate::learned::{ndim_one_hot, policy_step_value, Policy, PoolPolicy, StepContext};
use crate::optimizee::{sgd_steps, ParamLayout, Problem};
use crate::params::ParamSet;
use crate::pool::{PoolHyperparams, PoolKind, PoolMember};
use crate::seed;
use crate::tensor::Tensor;

/// Steps a policy on concrete gradients, carrying its recurrent state.
#[derive(Debug, Clone)]
pub struct Runner<'a> {
    policy: &'a dyn Policy,
    params: &'a ParamSet,
    one_hot: Tensor,
    state: Vec<Tensor>,
    step: u64,
    weights: Option<Tensor>,
}

impl<'a> Runner<'a> {
    pub fn new(policy: &'a dyn Policy, params: &'a ParamSet, layout: &ParamLayout) -> Result<Self> {
        Ok(Self {
            policy,
            params,
            one_hot: ndim_one_hot(layout)?,
            state: policy.initial_state(layout),
            step: 0,
            weights: None,
        })
    }

    /// Resumes from a saved state after `step` updates.
    pub fn resume(mut self, state: Vec<Tensor>, step: u64) -> Self {
        self.state = state;
        self.step = step;
        self
    }

    /// Update for `grad` (the caller subtracts it).
    pub fn update(&mut self, grad: &Tensor) -> Result<Tensor> {
        let ctx = StepContext {
            step: self.step + 1,
            ndim_one_hot: &self.one_hot,
        };
        let (update, state, weights) = policy_step_value(self.policy, self.params, grad, &self.state, &ctx)?;
        self.state = state;
        self.step += 1;
        self.weights = weights;
        Ok(update)
    }

    pub fn state(&self) -> &[Tensor] {
        &self.state
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Choice weights of the last update, if the policy produces them.
    pub fn weights(&self) -> Option<&Tensor> {
        self.weights.as_ref()
    }

    pub fn one_hot(&self) -> &Tensor {
        &self.one_hot
    }
}

/// `steps` plain SGD steps on batches drawn from a dedicated stream.
pub fn warmup(problem: &Problem, theta: &Tensor, steps: usize, lr: f64, seed: u64) -> Result<Tensor> {
    let batches = problem.sample_batches(steps, seed::derive_named(seed, "warmup", 0));
    sgd_steps(problem, theta, &batches, lr, seed::derive_named(seed, "warmup-noise", 0))
}

/// Per-epoch losses of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    pub diverged: bool,
    pub theta: Tensor,
}

fn subtract(theta: &mut Tensor, update: &Tensor) {
    theta.data_mut().iter_mut().zip(update.data()).for_each(|(t, u)| *t -= u);
}

/// Trains for `epochs` passes over the data, recording full-split losses
/// after each epoch. Divergence fills the remaining epochs with `+inf`.
pub fn train_epochs(
    policy: &dyn Policy,
    params: &ParamSet,
    problem: &Problem,
    theta0: &Tensor,
    epochs: usize,
    seed: u64,
) -> Result<RunOutcome> {
    let mut runner = Runner::new(policy, params, problem.layout())?;
    let mut theta = theta0.clone();
    let mut out = RunOutcome {
        train: Vec::with_capacity(epochs),
        validation: Vec::with_capacity(epochs),
        diverged: false,
        theta: theta0.clone(),
    };
    let mut step = 0u64;
    'epochs: for epoch in 0..epochs {
        for batch in problem.epoch_batches(seed, epoch as u64) {
            let grad = problem.gradient(&theta, &batch, seed::derive_named(seed, "noise", step));
            step += 1;
            let update = match grad.and_then(|(_, g)| runner.update(&g)) {
                Ok(u) => u,
                Err(Error::Divergence(_)) => {
                    out.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            subtract(&mut theta, &update);
        }
        let (train, validation) = (problem.train_loss(&theta)?, problem.validation_loss(&theta)?);
        if !train.is_finite() || !validation.is_finite() {
            out.diverged = true;
            break;
        }
        out.train.push(train);
        out.validation.push(validation);
    }
    if out.diverged {
        out.train.resize(epochs, f64::INFINITY);
        out.validation.resize(epochs, f64::INFINITY);
    }
    out.theta = theta;
    Ok(out)
}

/// Runs exactly `steps` updates on sampled batches; returns the final
/// parameters, or a divergence error.
pub fn train_steps(
    policy: &dyn Policy,
    params: &ParamSet,
    problem: &Problem,
    theta0: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut runner = Runner::new(policy, params, problem.layout())?;
    let mut theta = theta0.clone();
    for (i, batch) in problem.sample_batches(steps, seed).iter().enumerate() {
        let (_, g) = problem.gradient(&theta, batch, seed::derive_named(seed, "noise", i as u64))?;
        let update = runner.update(&g)?;
        subtract(&mut theta, &update);
        if !theta.all_finite() {
            return Err(Error::Divergence(format!("{} diverged at step {i}", policy.name())));
        }
    }
    Ok(theta)
}

/// Best validation loss of each grid point (`None` when it diverged).
pub fn grid_scores(kind: PoolKind, problem: &Problem, grid: &[f64], epochs: usize, seed: u64) -> Result<Vec<Option<f64>>> {
    let theta0 = problem.init(seed);
    grid.iter()
        .map(|&lr| {
            let policy = PoolPolicy(PoolMember::new(kind, lr));
            let run = train_epochs(&policy, &ParamSet::new(), problem, &theta0, epochs, seed)?;
            Ok((!run.diverged).then(|| run.validation.iter().cloned().fold(f64::INFINITY, f64::min)))
        })
        .collect()
}

/// The grid learning rate with the best validation loss after `epochs`
/// epochs from `problem.init(seed)`. Ties go to the smaller rate.
pub fn grid_search_lr(kind: PoolKind, problem: &Problem, grid: &[f64], epochs: usize, seed: u64) -> Result<PoolHyperparams> {
    if grid.is_empty() || epochs == 0 {
        return Err(Error::InvalidArgument("grid search needs a nonempty grid and at least one epoch".into()));
    }
    let scores = grid_scores(kind, problem, grid, epochs, seed)?;
    let best = grid
        .iter()
        .zip(&scores)
        .filter_map(|(&lr, s)| s.map(|s| (s, lr)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    match best {
        Some((_, lr)) => Ok(PoolHyperparams::with_lr(lr)),
        None => Err(Error::Divergence(format!(
            "every {kind} grid point diverged: {}",
            grid.iter().map(|lr| format!("lr={lr}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}
