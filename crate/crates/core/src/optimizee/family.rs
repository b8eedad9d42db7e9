use std::path::PathBuf;
use std::sync::Arc;

use super::{load_mnist, make_cnn, make_linear, make_mlp, make_quadratic, synth_classification};
use super::{DataFeed, DatasetSource, DpConfig, Optimizee, Problem};
use crate::error::{Error, Result};

/// Model trained on MNIST-format data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MnistModel {
    Mlp { hidden: usize },
    Cnn { channels: [usize; 2] },
}

/// A family of training problems; instances differ by seed.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    /// Rotated quadratics; each instance draws a new matrix.
    Quadratic { dim: usize, conditioning: f64 },
    /// Sigmoid MLP (linear when `hidden == 0`) on one fixed set of Gaussian
    /// blobs; instances differ in initialization and shuffling.
    Blobs {
        hidden: usize,
        dim: usize,
        classes: usize,
        samples: usize,
        separation: f64,
        batch: usize,
        data_seed: u64,
    },
    /// IDX files `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` in `dir`.
    Mnist {
        model: MnistModel,
        dir: PathBuf,
        train: usize,
        validation: usize,
        batch: usize,
    },
}

/// A [`ProblemSpec`] with its datasets loaded once.
#[derive(Debug, Clone)]
pub struct Family {
    spec: ProblemSpec,
    model: Option<Arc<dyn Optimizee>>,
    data: Option<DatasetSource>,
    dp: Option<DpConfig>,
}

impl Family {
    pub fn new(spec: ProblemSpec, dp: Option<DpConfig>) -> Result<Self> {
        let (model, data): (Option<Arc<dyn Optimizee>>, _) = match &spec {
            ProblemSpec::Quadratic { dim, conditioning } => {
                // validates the arguments once
                make_quadratic(*dim, *conditioning, 0)?;
                (None, None)
            }
            ProblemSpec::Blobs {
                hidden,
                dim,
                classes,
                samples,
                separation,
                batch,
                data_seed,
            } => {
                let data = synth_classification(*samples, *dim, *classes, *separation, *data_seed)?.with_batch_size(*batch);
                let model: Arc<dyn Optimizee> = if *hidden == 0 {
                    Arc::new(make_linear(*dim, *classes)?)
                } else {
                    Arc::new(make_mlp(*hidden, *dim, *classes)?)
                };
                (Some(model), Some(data))
            }
            ProblemSpec::Mnist {
                model,
                dir,
                train,
                validation,
                batch,
            } => {
                let data = load_mnist(dir, *train, *validation, *batch)?;
                let model: Arc<dyn Optimizee> = match model {
                    MnistModel::Mlp { hidden } => Arc::new(make_mlp(*hidden, 784, 10)?),
                    MnistModel::Cnn { channels } => Arc::new(make_cnn(*channels)?),
                };
                (Some(model), Some(data))
            }
        };
        if dp.is_some() && matches!(spec, ProblemSpec::Quadratic { .. }) {
            return Err(Error::InvalidArgument("DP gradients need per-sample data".into()));
        }
        Ok(Self { spec, model, data, dp })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn dp(&self) -> Option<DpConfig> {
        self.dp
    }

    /// Problem instance for `seed`.
    pub fn instance(&self, seed: u64) -> Result<Problem> {
        let problem = match (&self.spec, &self.model, &self.data) {
            (ProblemSpec::Quadratic { dim, conditioning }, _, _) => {
                Problem::new(Arc::new(make_quadratic(*dim, *conditioning, seed)?), DataFeed::FullBatch)
            }
            (_, Some(model), Some(data)) => Problem::new(model.clone(), DataFeed::Data(data.reseeded(seed))),
            _ => unreachable!("non-quadratic families load their model and data"),
        };
        Ok(match self.dp {
            Some(dp) => problem.with_dp(dp),
            None => problem,
        })
    }
}
