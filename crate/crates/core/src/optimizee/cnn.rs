use super::mlp::glorot_init;
use super::{Batch, Optimizee, ParamLayout};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Conv 3x3 -> ReLU -> MaxPool 2x2 -> Conv 5x5 -> ReLU -> MaxPool 2x2 -> Dense.
#[derive(Debug, Clone)]
pub struct Cnn {
    input: (usize, usize, usize),
    channels: [usize; 2],
    classes: usize,
    layout: ParamLayout,
}

impl Cnn {
    /// `input` is `(channels, height, width)`.
    pub fn new(input: (usize, usize, usize), channels: [usize; 2], classes: usize) -> Result<Self> {
        let (c, h, w) = input;
        let pooled = |size: usize| -> Option<usize> {
            let a = size.checked_sub(2)?;
            let a = a / 2;
            let b = a.checked_sub(4)?;
            (b >= 2).then_some(b / 2)
        };
        let (Some(h2), Some(w2)) = (pooled(h), pooled(w)) else {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} is too small for conv3-pool-conv5-pool"
            )));
        };
        if c == 0 || channels.contains(&0) || classes < 2 {
            return Err(Error::InvalidArgument("cnn needs positive channels and >= 2 classes".into()));
        }
        let flat = channels[1] * h2 * w2;
        let layout = ParamLayout::new([
            ("conv1.w", vec![channels[0], c, 3, 3]),
            ("conv1.b", vec![channels[0]]),
            ("conv2.w", vec![channels[1], channels[0], 5, 5]),
            ("conv2.b", vec![channels[1]]),
            ("dense.w", vec![flat, classes]),
            ("dense.b", vec![classes]),
        ]);
        Ok(Self {
            input,
            channels,
            classes,
            layout,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// CNN on `28x28x1` inputs with the given conv widths and 10 classes.
pub fn make_cnn(channels: [usize; 2]) -> Result<Cnn> {
    Cnn::new((1, 28, 28), channels, 10)
}

impl Optimizee for Cnn {
    fn name(&self) -> String {
        format!("cnn{}-{}", self.channels[0], self.channels[1])
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn init(&self, seed: u64) -> Tensor {
        glorot_init(&self.layout, seed)
    }

    fn logits(&self, tape: &mut Tape, theta: Var, inputs: &Tensor) -> Result<Option<Var>> {
        let (c, h, w) = self.input;
        let rows = inputs.shape().first().copied().unwrap_or(0);
        if inputs.numel() != rows * c * h * w {
            return Err(Error::ShapeMismatch {
                op: "cnn input",
                lhs: inputs.shape().to_vec(),
                rhs: vec![rows, c, h, w],
            });
        }
        let x = tape.leaf(inputs.clone().reshape(vec![rows, c, h, w])?);
        let views: Vec<Var> = (0..6)
            .map(|i| self.layout.view(tape, theta, i))
            .collect::<Result<_>>()?;
        let y = tape.conv2d(x, views[0], views[1])?;
        let y = tape.relu(y)?;
        let y = tape.maxpool2(y)?;
        let y = tape.conv2d(y, views[2], views[3])?;
        let y = tape.relu(y)?;
        let y = tape.maxpool2(y)?;
        let flat = tape.value(y).numel() / rows.max(1);
        let y = tape.reshape(y, &[rows, flat])?;
        Ok(Some(tape.affine(y, views[4], views[5])?))
    }

    fn loss(&self, tape: &mut Tape, theta: Var, batch: &Batch) -> Result<Var> {
        let logits = self.logits(tape, theta, &batch.inputs)?.expect("classifier");
        tape.softmax_cross_entropy(logits, &batch.labels)
    }
}
