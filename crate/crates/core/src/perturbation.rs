//! Weight-space and input perturbations applied while meta-training.
//!
//! Weight perturbations are relative: each tensor's noise or attack step is
//! scaled by that tensor's own l2 norm.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationKind {
    None,
    GaussianWeight,
    AdversarialWeight,
    InputNoise,
}

impl PerturbationKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::None => "none",
            PerturbationKind::GaussianWeight => "gaussian",
            PerturbationKind::AdversarialWeight => "adversarial",
            PerturbationKind::InputNoise => "input",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PerturbationKind::None,
            PerturbationKind::GaussianWeight,
            PerturbationKind::AdversarialWeight,
            PerturbationKind::InputNoise,
        ]
        .into_iter()
        .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub kind: PerturbationKind,
    /// Relative std of Gaussian weight noise, or absolute std of input noise.
    pub sigma: f64,
    /// Relative step of the adversarial attack.
    pub epsilon: f64,
    /// Attack depth.
    pub steps: usize,
    /// Step size of the non-adaptive attack form; kept for reference only.
    pub eta: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            kind: PerturbationKind::None,
            sigma: 0.0,
            epsilon: 0.0,
            steps: 1,
            eta: 0.0,
        }
    }
}

impl PerturbationConfig {
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: PerturbationKind::GaussianWeight,
            sigma,
            ..Self::default()
        }
    }

    pub fn adversarial(epsilon: f64, steps: usize) -> Self {
        Self {
            kind: PerturbationKind::AdversarialWeight,
            epsilon,
            steps,
            ..Self::default()
        }
    }

    pub fn input(sigma: f64) -> Self {
        Self {
            kind: PerturbationKind::InputNoise,
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.epsilon >= 0.0) || self.steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "perturbation needs sigma >= 0, epsilon >= 0 and steps >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// `phi + N(0, sigma^2 |phi_w|^2 / n_w)` per tensor `w` of `n_w` entries.
pub fn gaussian_weight_perturb(phi: &ParamSet, sigma: f64, noise_seed: u64) -> Result<ParamSet> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = seed::rng(noise_seed);
    let tensors = phi
        .tensors()
        .map(|t| {
            let std = sigma * t.l2_norm() / (t.numel().max(1) as f64).sqrt();
            if std == 0.0 {
                return Ok(t.clone());
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            let data = t.data().iter().map(|&x| x + normal.sample(&mut rng)).collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    phi.with_tensors(tensors)
}

/// Normalized ascent on `loss_grad` (which returns the gradient of the
/// truncation loss at the given weights): `psi_w += epsilon |phi_w| g_w / |g_w|`
/// for `steps` steps from `psi = 0`. Returns `phi + psi`. A tensor whose
/// gradient vanishes keeps its offset for that step.
pub fn adversarial_weight_perturb<F>(mut loss_grad: F, phi: &ParamSet, epsilon: f64, steps: usize) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<Vec<Tensor>>,
{
    if !(epsilon >= 0.0) || steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "adversarial perturbation needs epsilon >= 0 and steps >= 1 (got {epsilon}, {steps})"
        )));
    }
    let norms: Vec<f64> = phi.tensors().map(Tensor::l2_norm).collect();
    let mut current = phi.clone();
    if epsilon == 0.0 {
        return Ok(current);
    }
    for _ in 0..steps {
        let grads = loss_grad(&current)?;
        if grads.len() != phi.len() {
            return Err(Error::InvalidArgument(format!("expected {} gradients, got {}", phi.len(), grads.len())));
        }
        let moved = current
            .tensors()
            .zip(&grads)
            .zip(&norms)
            .map(|((w, g), &norm)| {
                let gn = g.l2_norm();
                if gn == 0.0 || !gn.is_finite() {
                    return Ok(w.clone());
                }
                let c = epsilon * norm / gn;
                w.zip_map(g, |x, gi| x + c * gi)
            })
            .collect::<Result<Vec<_>>>()?;
        current = current.with_tensors(moved)?;
    }
    Ok(current)
}

/// `grad + N(0, sigma^2)` per coordinate (absolute, not norm-relative).
pub fn input_perturb(grad: &Tensor, sigma: f64, noise_seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(grad.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("finite std");
    let mut rng = seed::rng(noise_seed);
    let data = grad.data().iter().map(|&g| g + normal.sample(&mut rng)).collect();
    Tensor::new(grad.shape().to_vec(), data)
}
