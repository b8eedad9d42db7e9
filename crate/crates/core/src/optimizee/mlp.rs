use rand::Rng;

use super::{Batch, Optimizee, ParamLayout};
use crate::error::{Error, Result};
use crate::seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Softmax classifier with one sigmoid hidden layer, or a linear softmax
/// classifier when `hidden == 0`.
#[derive(Debug, Clone)]
pub struct Mlp {
    in_dim: usize,
    hidden: usize,
    classes: usize,
    layout: ParamLayout,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        if in_dim == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "mlp needs in_dim >= 1 and classes >= 2 (got {in_dim}, {classes})"
            )));
        }
        let layout = if hidden == 0 {
            ParamLayout::new([("w", vec![in_dim, classes]), ("b", vec![classes])])
        } else {
            ParamLayout::new([
                ("w1", vec![in_dim, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, classes]),
                ("b2", vec![classes]),
            ])
        };
        Ok(Self {
            in_dim,
            hidden,
            classes,
            layout,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// 2-layer MLP with sigmoid hidden units.
pub fn make_mlp(hidden: usize, in_dim: usize, classes: usize) -> Result<Mlp> {
    if hidden == 0 {
        return Err(Error::InvalidArgument("mlp needs at least one hidden unit".into()));
    }
    Mlp::new(in_dim, hidden, classes)
}

/// Linear softmax classifier.
pub fn make_linear(in_dim: usize, classes: usize) -> Result<Mlp> {
    Mlp::new(in_dim, 0, classes)
}

/// Glorot-uniform weights, zero biases.
pub(crate) fn glorot_init(layout: &ParamLayout, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let mut data = Vec::with_capacity(layout.total());
    for spec in layout.specs() {
        if spec.shape.len() == 1 {
            data.extend(std::iter::repeat_n(0.0, spec.numel()));
            continue;
        }
        let (fan_in, fan_out) = match spec.shape.as_slice() {
            [i, o] => (*i, *o),
            // conv kernels [out, in, k, k]
            [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
            s => (s[0], s[s.len() - 1]),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        data.extend((0..spec.numel()).map(|_| rng.random_range(-limit..limit)));
    }
    Tensor::vector(data)
}

impl Optimizee for Mlp {
    fn name(&self) -> String {
        if self.hidden == 0 {
            format!("linear{}x{}", self.in_dim, self.classes)
        } else {
            format!("mlp{}-{}-{}", self.in_dim, self.hidden, self.classes)
        }
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn init(&self, seed: u64) -> Tensor {
        glorot_init(&self.layout, seed)
    }

    fn logits(&self, tape: &mut Tape, theta: Var, inputs: &Tensor) -> Result<Option<Var>> {
        let rows = inputs.shape().first().copied().unwrap_or(0);
        let width: usize = inputs.shape()[1..].iter().product();
        if width != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                lhs: inputs.shape().to_vec(),
                rhs: vec![rows, self.in_dim],
            });
        }
        let x = tape.leaf(inputs.clone().reshape(vec![rows, width])?);
        let out = if self.hidden == 0 {
            let w = self.layout.view(tape, theta, 0)?;
            let b = self.layout.view(tape, theta, 1)?;
            tape.affine(x, w, b)?
        } else {
            let w1 = self.layout.view(tape, theta, 0)?;
            let b1 = self.layout.view(tape, theta, 1)?;
            let w2 = self.layout.view(tape, theta, 2)?;
            let b2 = self.layout.view(tape, theta, 3)?;
            let h = tape.affine(x, w1, b1)?;
            let h = tape.sigmoid(h)?;
            tape.affine(h, w2, b2)?
        };
        Ok(Some(out))
    }

    fn loss(&self, tape: &mut Tape, theta: Var, batch: &Batch) -> Result<Var> {
        let logits = self.logits(tape, theta, &batch.inputs)?.expect("classifier");
        tape.softmax_cross_entropy(logits, &batch.labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::optimizee::loss_value;
    use approx::assert_abs_diff_eq;

    #[test]
    fn paper_width_parameter_count() {
        assert_eq!(make_mlp(20, 784, 10).unwrap().layout().total(), 15_910);
    }

    #[test]
    fn zero_weights_give_log_classes() {
        let mlp = make_mlp(5, 3, 4).unwrap();
        let theta = Tensor::zeros(&[mlp.layout().total()]);
        let batch = Batch::new(Tensor::ones(&[8, 3]), (0..8).map(|i| i % 4).collect()).unwrap();
        assert_abs_diff_eq!(loss_value(&mlp, &theta, &batch).unwrap(), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_is_differentiable_in_every_parameter() {
        for hidden in [0, 3] {
            let mlp = Mlp::new(3, hidden, 3).unwrap();
            let batch = Batch::new(
                Tensor::new(vec![4, 3], vec![0.1, -0.3, 0.8, 1.0, 0.2, -0.5, -0.7, 0.4, 0.9, 0.3, 0.3, -0.1]).unwrap(),
                vec![0, 2, 1, 2],
            )
            .unwrap();
            let theta = mlp.init(3);
            let err = grad_check(|t, th| mlp.loss(t, th, &batch), &theta, 1e-5).unwrap();
            assert!(err < 1e-6, "hidden={hidden}: {err}");
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mlp = make_mlp(4, 3, 2).unwrap();
        let batch = Batch::new(Tensor::ones(&[2, 5]), vec![0, 1]).unwrap();
        assert!(loss_value(&mlp, &mlp.init(0), &batch).is_err());
    }
}
