//! Training problems `M(x, theta)` driven by the optimizers.
//!
//! Every optimizee exposes its parameters as one flat vector with a
//! [`ParamLayout`] describing the named tensors packed inside it. Optimizers
//! work coordinate-wise on the flat vector; models slice their tensors back
//! out on the tape.

mod cnn;
mod data;
mod dp;
mod family;
mod idx;
mod mlp;
mod quadratic;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use cnn::{make_cnn, Cnn};
pub use data::{synth_classification, Batch, Dataset, DatasetSource};
pub use dp::{dp_gradient, DpConfig};
pub use family::{Family, MnistModel, ProblemSpec};
pub use idx::{load_idx, load_mnist, parse_idx, write_idx, IdxArray};
pub use mlp::{make_linear, make_mlp, Mlp};
pub use quadratic::{make_quadratic, make_quadratic_with, Quadratic};

/// Steps in one "epoch" of a full-batch problem.
pub const FULL_BATCH_EPOCH_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors packed into a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new<S: Into<String>>(tensors: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut specs = Vec::new();
        let mut total = 0;
        for (name, shape) in tensors {
            let spec = ParamSpec {
                name: name.into(),
                shape,
                offset: total,
            };
            total += spec.numel();
            specs.push(spec);
        }
        Self { specs, total }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Tensor rank of the tensor owning each coordinate.
    pub fn ndim_per_coordinate(&self) -> Vec<usize> {
        self.specs
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.shape.len(), s.numel()))
            .collect()
    }

    /// Expands one value per tensor into one value per coordinate.
    pub fn expand_per_tensor(&self, values: &[f64]) -> Tensor {
        assert_eq!(values.len(), self.specs.len());
        Tensor::vector(
            self.specs
                .iter()
                .zip(values)
                .flat_map(|(s, &v)| std::iter::repeat_n(v, s.numel()))
                .collect(),
        )
    }

    /// Tensor `i` of the flat parameter vector, reshaped, on the tape.
    pub fn view(&self, tape: &mut Tape, theta: Var, i: usize) -> Result<Var> {
        let spec = &self.specs[i];
        let flat = tape.slice(theta, 0, spec.offset, spec.numel())?;
        tape.reshape(flat, &spec.shape)
    }

    /// Copies tensor `i` out of a flat parameter vector.
    pub fn extract(&self, theta: &Tensor, i: usize) -> Tensor {
        let spec = &self.specs[i];
        Tensor::new(spec.shape.clone(), theta.data()[spec.offset..spec.offset + spec.numel()].to_vec())
            .expect("layout shape")
    }
}

/// A differentiable training problem.
pub trait Optimizee: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    fn layout(&self) -> &ParamLayout;

    /// Seed-deterministic initial parameters.
    fn init(&self, seed: u64) -> Tensor;

    /// Scalar loss for `batch` at the flat parameters `theta`.
    fn loss(&self, tape: &mut Tape, theta: Var, batch: &Batch) -> Result<Var>;

    /// Class scores for `inputs`, for optimizees that are classifiers.
    fn logits(&self, _tape: &mut Tape, _theta: Var, _inputs: &Tensor) -> Result<Option<Var>> {
        Ok(None)
    }

    /// The loss gradient expressed with tape primitives, when the optimizee
    /// has a closed form for it. Meta-gradients then include the dependence
    /// of the gradient on the parameters.
    fn taped_gradient(&self, _tape: &mut Tape, _theta: Var, _batch: &Batch) -> Option<Result<Var>> {
        None
    }
}

/// Loss value at `theta`.
pub fn loss_value(opt: &dyn Optimizee, theta: &Tensor, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let th = tape.leaf(theta.clone());
    let l = opt.loss(&mut tape, th, batch)?;
    Ok(tape.value(l).item())
}

/// Loss value and gradient at `theta` from one reverse pass.
pub fn loss_and_grad(opt: &dyn Optimizee, theta: &Tensor, batch: &Batch) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let th = tape.leaf(theta.clone());
    let l = opt.loss(&mut tape, th, batch)?;
    let value = tape.value(l).item();
    let grad = tape.backward(l)?.wrt(th);
    Ok((value, grad))
}

/// Gradients of each sample of `batch` separately.
pub fn per_sample_grads(opt: &dyn Optimizee, theta: &Tensor, batch: &Batch) -> Result<Vec<Tensor>> {
    (0..batch.size())
        .map(|i| loss_and_grad(opt, theta, &batch.sample(i)).map(|(_, g)| g))
        .collect()
}

/// Fraction of correctly classified samples, for classifier optimizees.
pub fn accuracy(opt: &dyn Optimizee, theta: &Tensor, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let th = tape.leaf(theta.clone());
    let logits = opt
        .logits(&mut tape, th, &batch.inputs)?
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a classifier", opt.name())))?;
    let scores = tape.value(logits);
    let k = scores.shape()[1];
    let correct = scores
        .data()
        .chunks(k)
        .zip(&batch.labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == label
        })
        .count();
    Ok(correct as f64 / batch.size() as f64)
}

/// Where batches come from.
#[derive(Debug, Clone)]
pub enum DataFeed {
    /// Every batch is the whole (deterministic) objective.
    FullBatch,
    Data(DatasetSource),
}

/// An optimizee instance paired with its data and gradient settings.
#[derive(Debug, Clone)]
pub struct Problem {
    pub optimizee: Arc<dyn Optimizee>,
    pub feed: DataFeed,
    pub dp: Option<DpConfig>,
}

impl Problem {
    pub fn new(optimizee: Arc<dyn Optimizee>, feed: DataFeed) -> Self {
        Self {
            optimizee,
            feed,
            dp: None,
        }
    }

    pub fn with_dp(mut self, dp: DpConfig) -> Self {
        self.dp = Some(dp);
        self
    }

    pub fn layout(&self) -> &ParamLayout {
        self.optimizee.layout()
    }

    /// `n` training batches from reshuffled epochs. Distinct `stream`s give
    /// independent orders of the instance's data.
    pub fn sample_batches(&self, n: usize, stream: u64) -> Vec<Batch> {
        match &self.feed {
            DataFeed::FullBatch => vec![Batch::empty(); n],
            DataFeed::Data(src) => src.reseeded(seed::derive(src.shuffle_seed, stream)).stream().take(n).collect(),
        }
    }

    /// Batches of one full pass over the training split (`stream` as in
    /// [`Problem::sample_batches`]).
    pub fn epoch_batches(&self, stream: u64, epoch: u64) -> Vec<Batch> {
        match &self.feed {
            DataFeed::FullBatch => vec![Batch::empty(); FULL_BATCH_EPOCH_STEPS],
            DataFeed::Data(src) => src.reseeded(seed::derive(src.shuffle_seed, stream)).epoch_batches(epoch),
        }
    }

    /// Training step gradient, privatized when DP is configured.
    pub fn gradient(&self, theta: &Tensor, batch: &Batch, noise_seed: u64) -> Result<(f64, Tensor)> {
        match &self.dp {
            None => loss_and_grad(self.optimizee.as_ref(), theta, batch),
            Some(dp) => {
                let loss = loss_value(self.optimizee.as_ref(), theta, batch)?;
                let samples = per_sample_grads(self.optimizee.as_ref(), theta, batch)?;
                let g = dp_gradient(&samples, dp.clip_eps, dp.noise_ratio, noise_seed)?;
                Ok((loss, g))
            }
        }
    }

    /// Loss over the full training split.
    pub fn train_loss(&self, theta: &Tensor) -> Result<f64> {
        match &self.feed {
            DataFeed::FullBatch => loss_value(self.optimizee.as_ref(), theta, &Batch::empty()),
            DataFeed::Data(src) => loss_value(self.optimizee.as_ref(), theta, &src.train.all()),
        }
    }

    /// Loss over the validation split (the objective itself for full-batch problems).
    pub fn validation_loss(&self, theta: &Tensor) -> Result<f64> {
        match &self.feed {
            DataFeed::FullBatch => loss_value(self.optimizee.as_ref(), theta, &Batch::empty()),
            DataFeed::Data(src) => loss_value(self.optimizee.as_ref(), theta, &src.validation.all()),
        }
    }

    pub fn init(&self, seed: u64) -> Tensor {
        self.optimizee.init(seed)
    }
}

/// Plain SGD steps; shared by warmup and tests.
pub fn sgd_steps(problem: &Problem, theta: &Tensor, batches: &[Batch], lr: f64, noise_seed: u64) -> Result<Tensor> {
    let mut theta = theta.clone();
    for (i, batch) in batches.iter().enumerate() {
        let (loss, g) = problem.gradient(&theta, batch, seed::derive(noise_seed, i as u64))?;
        if !loss.is_finite() || !g.all_finite() {
            return Err(Error::Divergence(format!("SGD step {i} produced a non-finite loss")));
        }
        for (t, gi) in theta.data_mut().iter_mut().zip(g.data()) {
            *t -= lr * gi;
        }
    }
    Ok(theta)
}
