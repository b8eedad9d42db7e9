//! Truncated back-propagation through time for learned optimizers, with
//! trajectory distillation from teacher optimizers.
//!
//! Each meta-epoch draws a problem instance, warms it up with SGD, and rolls
//! the student and every teacher from the same starting point. The unroll is
//! cut into truncations: optimizee parameters and recurrent states carry over
//! from one truncation to the next, while the meta-gradient only flows within
//! a truncation. Teachers are constants in the loss.

mod curriculum;
mod losses;

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::learned::{ChoicePolicy, Policy, PoolPolicy, StepContext};
use crate::optimizee::{loss_value, Batch, Family, Problem};
use crate::params::ParamSet;
use crate::perturbation::{
    adversarial_weight_perturb, gaussian_weight_perturb, input_perturb, PerturbationConfig, PerturbationKind,
};
use crate::pool::{pool_update, OptimizerState, PoolKind, PoolMember};
use crate::rollout::{warmup, Runner};
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use curriculum::{curriculum_advance, Curriculum};
pub use losses::{
    amalgamation_loss, distill_loss, distill_term, log_distances, meta_loss, AmalgamationKind, Trajectory,
    DISTILL_EPS,
};

/// A teacher: any policy with fixed weights.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub policy: Arc<dyn Policy>,
    pub params: ParamSet,
}

impl Teacher {
    pub fn pool(member: PoolMember) -> Self {
        Self {
            policy: Arc::new(PoolPolicy(member)),
            params: ParamSet::new(),
        }
    }

    pub fn choice(policy: ChoicePolicy, params: ParamSet) -> Self {
        Self {
            policy: Arc::new(policy),
            params,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AmalgamationMode {
    pub kind: AmalgamationKind,
    pub teachers: Vec<Teacher>,
}

impl AmalgamationMode {
    pub fn meta_only() -> Self {
        Self {
            kind: AmalgamationKind::MetaOnly,
            teachers: Vec::new(),
        }
    }

    pub fn new(kind: AmalgamationKind, teachers: Vec<Teacher>) -> Result<Self> {
        let mode = Self { kind, teachers };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AmalgamationKind::MetaOnly => Ok(()),
            AmalgamationKind::OptimalChoice if self.teachers.len() != 1 => Err(Error::InvalidArgument(format!(
                "optimal-choice amalgamation takes exactly one teacher, got {}",
                self.teachers.len()
            ))),
            _ if self.teachers.is_empty() => Err(Error::InvalidArgument(format!("{} amalgamation needs teachers", self.kind))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Steps per truncation; divides every curriculum stage.
    pub truncation: usize,
    /// Unroll lengths, one per curriculum stage.
    pub stages: Vec<usize>,
    /// Total meta-epoch budget.
    pub meta_epochs: usize,
    /// Meta-epochs after which a stage advances regardless of validation.
    pub stage_cap: usize,
    /// Validations without improvement before a stage advances.
    pub patience: usize,
    pub validation_interval: usize,
    /// Held-out instances per validation.
    pub validation_seeds: usize,
    /// Weight of the distillation term.
    pub alpha: f64,
    pub meta_lr: f64,
    /// Global-norm clip of the meta-gradient.
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub random_scaling: bool,
    /// Scales are drawn from `[exp(-b), exp(b)]`.
    pub scale_log_bound: f64,
    /// Restart teachers from the student's parameters at every truncation.
    pub reset_teachers: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            truncation: 100,
            stages: vec![100, 200, 500, 1000],
            meta_epochs: 800,
            stage_cap: 200,
            patience: 3,
            validation_interval: 40,
            validation_seeds: 2,
            alpha: 1.0,
            meta_lr: 1e-3,
            grad_clip: 10.0,
            warmup_steps: 100,
            warmup_lr: 0.01,
            random_scaling: true,
            scale_log_bound: 1.0,
            reset_teachers: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |field: &str, detail: String| Err(Error::Config {
            field: field.into(),
            detail,
        });
        if self.truncation == 0 {
            return field("train.truncation", "must be positive".into());
        }
        if self.stages.is_empty() || self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return field("train.stages", format!("must be nonempty and increasing, got {:?}", self.stages));
        }
        if let Some(n) = self.stages.iter().find(|&&n| n % self.truncation != 0) {
            return field("train.stages", format!("unroll {n} is not a multiple of the truncation {}", self.truncation));
        }
        for (name, v) in [
            ("train.validation_interval", self.validation_interval),
            ("train.validation_seeds", self.validation_seeds),
            ("train.stage_cap", self.stage_cap),
        ] {
            if v == 0 {
                return field(name, "must be positive".into());
            }
        }
        if !(self.alpha >= 0.0) {
            return field("train.alpha", format!("must be >= 0, got {}", self.alpha));
        }
        if !(self.meta_lr > 0.0) {
            return field("train.meta_lr", format!("must be positive, got {}", self.meta_lr));
        }
        if !(self.grad_clip > 0.0) {
            return field("train.grad_clip", format!("must be positive, got {}", self.grad_clip));
        }
        if !(self.warmup_lr >= 0.0) {
            return field("train.warmup_lr", format!("must be >= 0, got {}", self.warmup_lr));
        }
        if !(self.scale_log_bound >= 0.0) {
            return field("train.scale_log_bound", format!("must be >= 0, got {}", self.scale_log_bound));
        }
        Ok(())
    }
}

/// One line of the meta-training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub meta_epoch: usize,
    pub stage: usize,
    pub unroll: usize,
    /// Mean meta loss over the epoch's completed truncations.
    pub train_meta_loss: f64,
    /// Mean total loss (meta plus distillation) over the same truncations.
    pub train_loss: f64,
    pub validation_meta_loss: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation weights of the last stage reached.
    pub params: ParamSet,
    pub log: Vec<EpochRecord>,
    pub final_unroll: usize,
    /// Validation meta loss of `params` at `final_unroll`.
    pub final_validation: f64,
}

/// Optimizer state carried across truncations.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Carry {
    pub theta: Tensor,
    pub state: Vec<Tensor>,
    pub step: u64,
}

/// Everything fixed for one meta-epoch.
struct EpochData<'a> {
    problem: &'a Problem,
    batches: Vec<Batch>,
    initial_losses: Vec<f64>,
    /// Per-coordinate random scale for the student, if enabled.
    scale: Option<Tensor>,
    one_hot: Tensor,
    /// Seed of the per-step gradient noise (DP) shared by all optimizers.
    noise_seed: u64,
    /// Absolute std and seed of student input noise.
    input_noise: Option<(f64, u64)>,
}

struct TruncationResult {
    loss: f64,
    meta: f64,
    grads: Vec<Tensor>,
    carry: Carry,
    thetas: Vec<Tensor>,
}

fn divergence(what: &str) -> Error {
    Error::Divergence(what.into())
}

/// Student gradient at `theta` on the tape: exact when the optimizee has a
/// taped gradient and no DP noise, otherwise a detached constant.
fn taped_grad(tape: &mut Tape, data: &EpochData, theta: Var, batch: &Batch, step_index: usize) -> Result<Var> {
    if data.problem.dp.is_none() {
        if let Some(g) = data.problem.optimizee.taped_gradient(tape, theta, batch) {
            return g;
        }
    }
    let value = tape.value(theta).clone();
    let (_, g) = data
        .problem
        .gradient(&value, batch, seed::derive(data.noise_seed, step_index as u64))?;
    if !g.all_finite() {
        return Err(divergence("non-finite optimizee gradient"));
    }
    Ok(tape.leaf(g))
}

/// Student nodes of one truncation.
struct TruncationGraph {
    total: Var,
    meta: Var,
    thetas: Vec<Var>,
    state: Vec<Var>,
}

/// Records the student's steps over `range` and the truncation loss on `tape`.
#[allow(clippy::too_many_arguments)]
fn truncation_graph(
    tape: &mut Tape,
    policy: &dyn Policy,
    phi: &[Var],
    data: &EpochData,
    carry: &Carry,
    range: Range<usize>,
    kind: AmalgamationKind,
    teachers: &[Vec<Tensor>],
    alpha: f64,
) -> Result<TruncationGraph> {
    let mut theta = tape.leaf(carry.theta.clone());
    let mut state: Vec<Var> = carry.state.iter().map(|t| tape.leaf(t.clone())).collect();
    let scales = data
        .scale
        .as_ref()
        .map(|s| (tape.leaf(s.clone()), tape.leaf(s.map(|x| 1.0 / x))));
    let mut thetas = Vec::with_capacity(range.len());
    let mut losses = Vec::with_capacity(range.len());
    for (k, i) in range.clone().enumerate() {
        let batch = &data.batches[i];
        let mut g = taped_grad(tape, data, theta, batch, i)?;
        if let Some((sigma, noise_seed)) = data.input_noise {
            let noise = input_perturb(&Tensor::zeros(&[carry.theta.numel()]), sigma, seed::derive(noise_seed, i as u64))?;
            let noise = tape.leaf(noise);
            g = tape.add(g, noise)?;
        }
        if let Some((s, _)) = scales {
            g = tape.mul(g, s)?;
        }
        let ctx = StepContext {
            step: carry.step + k as u64 + 1,
            ndim_one_hot: &data.one_hot,
        };
        let out = policy.step(tape, phi, g, &state, &ctx)?;
        let update = match scales {
            Some((_, inv)) => tape.mul(out.update, inv)?,
            None => out.update,
        };
        theta = tape.sub(theta, update)?;
        let loss = data.problem.optimizee.loss(tape, theta, batch)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() || lv <= 0.0 || !tape.value(theta).all_finite() {
            return Err(divergence("student optimizee loss is not finite and positive"));
        }
        thetas.push(theta);
        losses.push(loss);
        state = out.state;
    }
    let initial = &data.initial_losses[range];
    let (total, meta) = losses::amalgamation_loss_taped(tape, kind, &thetas, &losses, initial, teachers, alpha)?;
    Ok(TruncationGraph {
        total,
        meta,
        thetas,
        state,
    })
}

/// Rolls the student over `range` with weights `phi` on a fresh tape and
/// differentiates the truncation loss.
#[allow(clippy::too_many_arguments)]
fn student_truncation(
    policy: &dyn Policy,
    phi: &ParamSet,
    data: &EpochData,
    carry: &Carry,
    range: Range<usize>,
    kind: AmalgamationKind,
    teachers: &[Vec<Tensor>],
    alpha: f64,
) -> Result<TruncationResult> {
    let mut tape = Tape::new();
    let phi_vars = phi.leaves(&mut tape);
    let graph = truncation_graph(&mut tape, policy, &phi_vars, data, carry, range, kind, teachers, alpha)?;
    let (loss, meta) = (tape.value(graph.total).item(), tape.value(graph.meta).item());
    if !loss.is_finite() {
        return Err(divergence("non-finite truncation loss"));
    }
    let grads = tape.backward(graph.total)?;
    let grads: Vec<Tensor> = phi_vars.iter().map(|&v| grads.wrt(v)).collect();
    if !grads.iter().all(Tensor::all_finite) {
        return Err(divergence("non-finite meta-gradient"));
    }
    let last = *graph.thetas.last().expect("nonempty truncation");
    Ok(TruncationResult {
        loss,
        meta,
        grads,
        carry: Carry {
            theta: tape.value(last).clone(),
            state: graph.state.iter().map(|&v| tape.value(v).clone()).collect(),
            step: carry.step + graph.thetas.len() as u64,
        },
        thetas: graph.thetas.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Meta loss of `batches.len()` student steps from `theta0` on `problem`,
/// recorded on `tape` with the policy weights given as nodes `phi`. No
/// scaling, noise or teachers; this is the quantity meta-gradients descend.
pub fn unroll_meta_loss(
    tape: &mut Tape,
    policy: &dyn Policy,
    phi: &[Var],
    problem: &Problem,
    theta0: &Tensor,
    batches: &[Batch],
) -> Result<Var> {
    let initial_losses = batches
        .iter()
        .map(|b| loss_value(problem.optimizee.as_ref(), theta0, b))
        .collect::<Result<Vec<f64>>>()?;
    let data = EpochData {
        problem,
        batches: batches.to_vec(),
        initial_losses,
        scale: None,
        one_hot: crate::learned::ndim_one_hot(problem.layout())?,
        noise_seed: 0,
        input_noise: None,
    };
    let carry = Carry {
        theta: theta0.clone(),
        state: policy.initial_state(problem.layout()),
        step: 0,
    };
    let graph = truncation_graph(tape, policy, phi, &data, &carry, 0..batches.len(), AmalgamationKind::MetaOnly, &[], 0.0)?;
    Ok(graph.meta)
}

/// Rolls a fixed-weight policy over `range` at value level with clean gradients.
fn value_truncation(
    policy: &dyn Policy,
    params: &ParamSet,
    data: &EpochData,
    carry: &Carry,
    range: Range<usize>,
) -> Result<(Vec<Tensor>, Carry)> {
    let mut runner = Runner::new(policy, params, data.problem.layout())?.resume(carry.state.clone(), carry.step);
    let mut theta = carry.theta.clone();
    let mut thetas = Vec::with_capacity(range.len());
    for i in range {
        let (_, g) = data
            .problem
            .gradient(&theta, &data.batches[i], seed::derive(data.noise_seed, i as u64))?;
        let u = runner.update(&g)?;
        theta = theta.zip_map(&u, |t, u| t - u)?;
        if !theta.all_finite() {
            return Err(divergence("teacher diverged"));
        }
        thetas.push(theta.clone());
    }
    Ok((
        thetas,
        Carry {
            theta,
            state: runner.state().to_vec(),
            step: runner.step(),
        },
    ))
}

/// Adam on the policy weights, with global-norm clipping.
#[derive(Debug, Clone)]
struct MetaOptimizer {
    member: PoolMember,
    clip: f64,
    states: Vec<OptimizerState>,
}

impl MetaOptimizer {
    fn new(params: &ParamSet, lr: f64, clip: f64) -> Self {
        Self {
            member: PoolMember::new(PoolKind::Adam, lr),
            clip,
            states: params.tensors().map(|t| OptimizerState::zeros(t.shape())).collect(),
        }
    }

    fn step(&mut self, params: &ParamSet, grads: &[Tensor]) -> Result<ParamSet> {
        let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let factor = if norm > self.clip { self.clip / norm } else { 1.0 };
        let mut next = Vec::with_capacity(grads.len());
        for ((p, g), state) in params.tensors().zip(grads).zip(self.states.iter_mut()) {
            let (update, s) = pool_update(&self.member, &g.map(|x| x * factor), state)?;
            *state = s;
            next.push(p.zip_map(&update, |a, u| a - u)?);
        }
        params.with_tensors(next)
    }
}

/// Per-tensor scales `exp(U(-b, b))`, expanded per coordinate.
pub fn random_scales(problem: &Problem, log_bound: f64, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let layout = problem.layout();
    let draws: Vec<f64> = layout
        .specs()
        .iter()
        .map(|_| if log_bound > 0.0 { rng.random_range(-log_bound..=log_bound).exp() } else { 1.0 })
        .collect();
    layout.expand_per_tensor(&draws)
}

/// Warmed-up starting point, batches and initial losses of one instance.
fn prepare(problem: &Problem, config: &TrainConfig, instance_seed: u64, unroll: usize) -> Result<(Tensor, Vec<Batch>, Vec<f64>)> {
    let theta0 = warmup(
        problem,
        &problem.init(instance_seed),
        config.warmup_steps,
        config.warmup_lr,
        instance_seed,
    )?;
    let batches = problem.sample_batches(unroll, seed::derive_named(instance_seed, "batches", 0));
    let initial = batches
        .iter()
        .map(|b| loss_value(problem.optimizee.as_ref(), &theta0, b))
        .collect::<Result<Vec<f64>>>()?;
    if initial.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Domain {
            op: "meta_loss",
            detail: "initial optimizee loss must be finite and positive".into(),
        });
    }
    Ok((theta0, batches, initial))
}

/// Mean log improvement of a fixed policy over `unroll` steps, averaged over
/// `config.validation_seeds` held-out instances. Divergence gives `+inf`.
pub fn validation_meta_loss(policy: &dyn Policy, params: &ParamSet, family: &Family, config: &TrainConfig, unroll: usize) -> Result<f64> {
    let mut total = 0.0;
    for v in 0..config.validation_seeds {
        let instance_seed = seed::derive_named(config.seed, "validation", v as u64);
        match student_meta_loss(policy, params, family, config, unroll, instance_seed) {
            Ok(m) => total += m,
            Err(Error::Divergence(_)) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(total / config.validation_seeds as f64)
}

/// Value-level trajectory of a fixed policy on one instance.
pub fn policy_trajectory(
    policy: &dyn Policy,
    params: &ParamSet,
    family: &Family,
    config: &TrainConfig,
    unroll: usize,
    instance_seed: u64,
) -> Result<(Trajectory, Vec<Tensor>)> {
    let problem = family.instance(instance_seed)?;
    let (theta0, batches, initial) = prepare(&problem, config, instance_seed, unroll)?;
    let mut runner = Runner::new(policy, params, problem.layout())?;
    let mut theta = theta0;
    let noise_seed = seed::derive_named(instance_seed, "noise", 0);
    let mut traj = Trajectory {
        tag: policy.name(),
        params_at_step: Vec::with_capacity(unroll),
        losses_at_step: Vec::with_capacity(unroll),
        initial_losses: initial,
    };
    let mut weights = Vec::new();
    for (i, batch) in batches.iter().enumerate() {
        let (_, g) = problem.gradient(&theta, batch, seed::derive(noise_seed, i as u64))?;
        let u = runner.update(&g)?;
        theta = theta.zip_map(&u, |t, u| t - u)?;
        let l = loss_value(problem.optimizee.as_ref(), &theta, batch)?;
        if !l.is_finite() || l <= 0.0 {
            return Err(divergence("validation rollout diverged"));
        }
        traj.params_at_step.push(theta.clone());
        traj.losses_at_step.push(l);
        if let Some(w) = runner.weights() {
            weights.push(w.clone());
        }
    }
    Ok((traj, weights))
}

fn student_meta_loss(policy: &dyn Policy, params: &ParamSet, family: &Family, config: &TrainConfig, unroll: usize, instance_seed: u64) -> Result<f64> {
    let (traj, _) = policy_trajectory(policy, params, family, config, unroll, instance_seed)?;
    meta_loss(&traj)
}

struct EpochOutcome {
    params: ParamSet,
    meta: f64,
    loss: f64,
    diverged: bool,
}

/// Drives [`train_truncated`].
struct MetaTrainer<'a> {
    policy: &'a dyn Policy,
    mode: &'a AmalgamationMode,
    family: &'a Family,
    config: &'a TrainConfig,
    perturbation: &'a PerturbationConfig,
}

impl MetaTrainer<'_> {
    fn epoch(&self, mut phi: ParamSet, meta_opt: &mut MetaOptimizer, epoch: usize, unroll: usize) -> Result<EpochOutcome> {
        let cfg = self.config;
        let instance_seed = seed::derive_named(cfg.seed, "train", epoch as u64);
        let problem = self.family.instance(instance_seed)?;
        let diverged = |phi| EpochOutcome {
            params: phi,
            meta: f64::NAN,
            loss: f64::NAN,
            diverged: true,
        };
        let (theta0, batches, initial_losses) = match prepare(&problem, cfg, instance_seed, unroll) {
            Ok(p) => p,
            Err(Error::Divergence(_)) => return Ok(diverged(phi)),
            Err(e) => return Err(e),
        };
        let input_noise = (self.perturbation.kind == PerturbationKind::InputNoise && self.perturbation.sigma > 0.0)
            .then(|| (self.perturbation.sigma, seed::derive_named(instance_seed, "input-noise", 0)));
        let data = EpochData {
            problem: &problem,
            batches,
            initial_losses,
            scale: cfg
                .random_scaling
                .then(|| random_scales(&problem, cfg.scale_log_bound, seed::derive_named(instance_seed, "scale", 0))),
            one_hot: crate::learned::ndim_one_hot(problem.layout())?,
            noise_seed: seed::derive_named(instance_seed, "noise", 0),
            input_noise,
        };
        let layout = problem.layout();
        let mut student = Carry {
            theta: theta0.clone(),
            state: self.policy.initial_state(layout),
            step: 0,
        };
        let mut teachers: Vec<Carry> = self
            .mode
            .teachers
            .iter()
            .map(|t| Carry {
                theta: theta0.clone(),
                state: t.policy.initial_state(layout),
                step: 0,
            })
            .collect();
        let (mut meta_sum, mut loss_sum, mut done) = (0.0, 0.0, 0usize);
        for k in 0..unroll / cfg.truncation {
            let range = k * cfg.truncation..(k + 1) * cfg.truncation;
            let mut snapshots = Vec::with_capacity(teachers.len());
            for (teacher, carry) in self.mode.teachers.iter().zip(teachers.iter_mut()) {
                if cfg.reset_teachers {
                    carry.theta = student.theta.clone();
                }
                let (thetas, next) = value_truncation(teacher.policy.as_ref(), &teacher.params, &data, carry, range.clone())?;
                *carry = next;
                snapshots.push(thetas);
            }
            let run = |p: &ParamSet| {
                student_truncation(self.policy, p, &data, &student, range.clone(), self.mode.kind, &snapshots, cfg.alpha)
            };
            let perturb_seed = seed::derive_named(instance_seed, "weight-noise", k as u64);
            let result = match self.perturbation.kind {
                PerturbationKind::GaussianWeight => {
                    gaussian_weight_perturb(&phi, self.perturbation.sigma, perturb_seed).and_then(|p| run(&p))
                }
                PerturbationKind::AdversarialWeight => adversarial_weight_perturb(
                    |p| run(p).map(|r| r.grads),
                    &phi,
                    self.perturbation.epsilon,
                    self.perturbation.steps,
                )
                .and_then(|p| run(&p)),
                PerturbationKind::None | PerturbationKind::InputNoise => run(&phi),
            };
            let result = match result {
                Ok(r) => r,
                Err(Error::Divergence(_)) => return Ok(diverged(phi)),
                Err(e) => return Err(e),
            };
            phi = meta_opt.step(&phi, &result.grads)?;
            meta_sum += result.meta;
            loss_sum += result.loss;
            done += 1;
            debug_assert_eq!(result.thetas.len(), cfg.truncation);
            student = result.carry;
        }
        Ok(EpochOutcome {
            params: phi,
            meta: meta_sum / done as f64,
            loss: loss_sum / done as f64,
            diverged: false,
        })
    }
}

/// Meta-trains `policy` from `init` against `mode`'s teachers on `family`.
pub fn train_truncated(
    policy: &dyn Policy,
    init: ParamSet,
    mode: &AmalgamationMode,
    family: &Family,
    config: &TrainConfig,
    perturbation: &PerturbationConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    mode.validate()?;
    perturbation.validate()?;
    let trainer = MetaTrainer {
        policy,
        mode,
        family,
        config,
        perturbation,
    };
    let mut meta_opt = MetaOptimizer::new(&init, config.meta_lr, config.grad_clip);
    let mut phi = init;
    let mut curriculum = Curriculum::default();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut log = Vec::with_capacity(config.meta_epochs);
    for epoch in 0..config.meta_epochs {
        let unroll = config.stages[curriculum.stage];
        let out = trainer.epoch(phi, &mut meta_opt, epoch, unroll)?;
        phi = out.params;
        let mut record = EpochRecord {
            meta_epoch: epoch,
            stage: curriculum.stage,
            unroll,
            train_meta_loss: out.meta,
            train_loss: out.loss,
            validation_meta_loss: None,
            diverged: out.diverged,
        };
        curriculum.epochs_in_stage += 1;
        if (epoch + 1) % config.validation_interval == 0 {
            let v = validation_meta_loss(policy, &phi, family, config, unroll)?;
            record.validation_meta_loss = Some(v);
            curriculum.history.push(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, phi.clone()));
            }
        }
        log.push(record);
        let next = curriculum_advance(&curriculum, &config.stages, config.patience, config.stage_cap);
        if next.stage != curriculum.stage {
            best = None;
        }
        curriculum = next;
    }
    let params = best.map_or(phi, |(_, p)| p);
    let final_unroll = log.last().map_or(config.stages[0], |r| r.unroll);
    let final_validation = validation_meta_loss(policy, &params, family, config, final_unroll)?;
    Ok(TrainOutcome {
        params,
        log,
        final_unroll,
        final_validation,
    })
}

/// Trains a soft-choice policy over `pool` on the meta loss alone.
pub fn train_choice_policy(
    pool: &[PoolMember],
    family: &Family,
    config: &TrainConfig,
    perturbation: &PerturbationConfig,
) -> Result<(ChoicePolicy, TrainOutcome)> {
    let policy = ChoicePolicy::new(pool.to_vec())?;
    let config = TrainConfig {
        alpha: 0.0,
        ..config.clone()
    };
    let init = policy.init_params(seed::derive_named(config.seed, "choice-init", 0));
    let outcome = train_truncated(&policy, init, &AmalgamationMode::meta_only(), family, &config, perturbation)?;
    Ok((policy, outcome))
}

#[cfg(test)]
mod tests;
