use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Differentially-private gradient settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub clip_eps: f64,
    pub noise_ratio: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_eps: 1.0,
            noise_ratio: 1.1,
        }
    }
}

/// Clips each per-sample gradient to norm `clip_eps`, sums, adds
/// `N(0, (noise_ratio * clip_eps)^2)` per coordinate to the sum, and divides by
/// the batch size.
pub fn dp_gradient(per_sample: &[Tensor], clip_eps: f64, noise_ratio: f64, noise_seed: u64) -> Result<Tensor> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::InvalidArgument("dp_gradient of an empty batch".into()))?;
    if !(clip_eps > 0.0) || !(noise_ratio >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dp_gradient needs clip_eps > 0 and noise_ratio >= 0 (got {clip_eps}, {noise_ratio})"
        )));
    }
    let mut total = vec![0.0; first.numel()];
    for g in per_sample {
        if g.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "dp_gradient",
                lhs: first.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let norm = g.l2_norm();
        let scale = if norm > clip_eps { clip_eps / norm } else { 1.0 };
        total.iter_mut().zip(g.data()).for_each(|(t, x)| *t += scale * x);
    }
    if noise_ratio > 0.0 {
        let normal = Normal::new(0.0, noise_ratio * clip_eps).expect("positive std");
        let mut rng = seed::rng(noise_seed);
        total.iter_mut().for_each(|t| *t += normal.sample(&mut rng));
    }
    let b = per_sample.len() as f64;
    Tensor::new(first.shape().to_vec(), total.into_iter().map(|t| t / b).collect())
}
