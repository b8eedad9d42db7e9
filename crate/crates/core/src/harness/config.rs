//! Experiment configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment, and sections are
//! spelled into the key (`train.truncation = 20`). Every key is optional;
//! [`ExperimentConfig::to_text`] writes the full effective configuration,
//! which parses back to the same value.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | master seed |
//! | `out` | `runs` | output directory |
//! | `replicates` | 2 | independently meta-trained students |
//! | `evals_per_replicate` | 10 | evaluation runs per student |
//! | `eval_epochs` | 25 | epochs per evaluation run |
//! | `mode` | `optimal-choice` | `meta-only`, `mean`, `min-max` or `optimal-choice` |
//! | `pool` | `small` | `small`, `large` or a comma list of optimizer names |
//! | `pool.lr.<name>` | tuned | fixed learning rate; skips the grid search for that member |
//! | `pool.grid` | 5e-4 .. 0.5 | learning rates tried by the grid search |
//! | `pool.grid_epochs` | 5 | epochs per grid point |
//! | `policy.out_init` | 0.01 | output-layer init range of the student |
//! | `problem.name` | the kind | label used in reports |
//! | `problem.kind` | `quadratic` | `quadratic`, `blobs`, `mnist-mlp` or `mnist-cnn` |
//! | `problem.*` | | shape of the problem family, see [`ProblemSpec`] |
//! | `dp.enabled`, `dp.clip`, `dp.noise` | off, 1, 1.1 | per-sample clipped noisy gradients |
//! | `perturbation.kind` | `none` | `none`, `gaussian`, `adversarial` or `input` |
//! | `perturbation.sigma`, `.epsilon`, `.steps` | 0, 0, 1 | perturbation strength |
//! | `train.*` | | every field of [`TrainConfig`] except the seed |
//! | `evaluate.baselines` | false | also evaluate each pool member |

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optimizee::{DpConfig, MnistModel, ProblemSpec};
use crate::perturbation::{PerturbationConfig, PerturbationKind};
use crate::pool::{default_lr_grid, PoolKind};
use crate::trainer::{AmalgamationKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub replicates: usize,
    pub evals_per_replicate: usize,
    pub eval_epochs: usize,
    pub mode: AmalgamationKind,
    pub pool: Vec<PoolKind>,
    /// Learning rates fixed by the config, by member.
    pub pool_lr: Vec<(PoolKind, f64)>,
    pub grid: Vec<f64>,
    pub grid_epochs: usize,
    pub out_init: f64,
    pub problem_name: String,
    pub problem: ProblemSpec,
    pub dp: Option<DpConfig>,
    pub perturbation: PerturbationConfig,
    /// `train.seed` is replaced per replicate.
    pub train: TrainConfig,
    pub baselines: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            replicates: 2,
            evals_per_replicate: 10,
            eval_epochs: 25,
            mode: AmalgamationKind::OptimalChoice,
            pool: PoolKind::small(),
            pool_lr: Vec::new(),
            grid: default_lr_grid(),
            grid_epochs: 5,
            out_init: 0.01,
            problem_name: "quadratic".into(),
            problem: ProblemSpec::Quadratic {
                dim: 10,
                conditioning: 10.0,
            },
            dp: None,
            perturbation: PerturbationConfig::default(),
            train: TrainConfig::default(),
            baselines: false,
        }
    }
}

fn kind_name(spec: &ProblemSpec) -> &'static str {
    match spec {
        ProblemSpec::Quadratic { .. } => "quadratic",
        ProblemSpec::Blobs { .. } => "blobs",
        ProblemSpec::Mnist {
            model: MnistModel::Mlp { .. },
            ..
        } => "mnist-mlp",
        ProblemSpec::Mnist {
            model: MnistModel::Cnn { .. },
            ..
        } => "mnist-cnn",
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Raw pairs with the line each came from; keys are removed as they are read.
struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    field: format!("line {}", i + 1),
                    detail: format!("expected `key = value`, found `{line}`"),
                });
            };
            let key = k.trim().to_string();
            if let Some((first, _)) = map.insert(key.clone(), (i + 1, v.trim().to_string())) {
                return Err(Error::Config {
                    field: key,
                    detail: format!("set twice (lines {first} and {})", i + 1),
                });
            }
        }
        Ok(Self { map })
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|e| Error::Config {
                field: key.into(),
                detail: format!("line {line}: cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|e| Error::Config {
                        field: key.into(),
                        detail: format!("line {line}: cannot parse `{s}`: {e}"),
                    })
                })
                .collect(),
        }
    }

    fn check(&self, key: &str, ok: bool, detail: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                field: key.into(),
                detail: detail.into(),
            })
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let d = Self::default();
        let dt = TrainConfig::default();

        let pool_text: String = f.take("pool", "small".to_string())?;
        let pool = match pool_text.as_str() {
            "small" => PoolKind::small(),
            "large" => PoolKind::large(),
            list => list
                .split(',')
                .map(|s| {
                    s.parse().map_err(|e: Error| Error::Config {
                        field: "pool".into(),
                        detail: e.to_string(),
                    })
                })
                .collect::<Result<Vec<PoolKind>>>()?,
        };
        let mut pool_lr = Vec::new();
        for kind in PoolKind::ALL {
            let key = format!("pool.lr.{}", kind.name());
            if f.map.contains_key(&key) {
                let lr: f64 = f.take(&key, 0.0)?;
                f.check(&key, lr > 0.0, "learning rate must be positive")?;
                f.check(&key, pool.contains(&kind), "optimizer is not in the pool")?;
                pool_lr.push((kind, lr));
            }
        }

        let kind: String = f.take("problem.kind", "quadratic".to_string())?;
        let problem = match kind.as_str() {
            "quadratic" => ProblemSpec::Quadratic {
                dim: f.take("problem.dim", 10)?,
                conditioning: f.take("problem.conditioning", 10.0)?,
            },
            "blobs" => ProblemSpec::Blobs {
                hidden: f.take("problem.hidden", 20)?,
                dim: f.take("problem.dim", 8)?,
                classes: f.take("problem.classes", 4)?,
                samples: f.take("problem.samples", 1000)?,
                separation: f.take("problem.separation", 2.0)?,
                batch: f.take("problem.batch", 32)?,
                data_seed: f.take("problem.data_seed", 0)?,
            },
            "mnist-mlp" | "mnist-cnn" => {
                let model = if kind == "mnist-mlp" {
                    MnistModel::Mlp {
                        hidden: f.take("problem.hidden", 20)?,
                    }
                } else {
                    let ch: Vec<usize> = f.take_list("problem.channels", vec![16, 32])?;
                    f.check("problem.channels", ch.len() == 2, "expected two channel counts")?;
                    MnistModel::Cnn { channels: [ch[0], ch[1]] }
                };
                ProblemSpec::Mnist {
                    model,
                    dir: PathBuf::from(f.take("problem.dir", String::new())?),
                    train: f.take("problem.train", 50_000)?,
                    validation: f.take("problem.validation", 10_000)?,
                    batch: f.take("problem.batch", 128)?,
                }
            }
            other => {
                return Err(Error::Config {
                    field: "problem.kind".into(),
                    detail: format!("unknown problem kind `{other}`"),
                })
            }
        };

        let dp_on: bool = f.take("dp.enabled", false)?;
        let dd = DpConfig::default();
        let dp_cfg = DpConfig {
            clip_eps: f.take("dp.clip", dd.clip_eps)?,
            noise_ratio: f.take("dp.noise", dd.noise_ratio)?,
        };

        let pk: PerturbationKind = f.take("perturbation.kind", PerturbationKind::None)?;
        let dpert = PerturbationConfig::default();
        let perturbation = PerturbationConfig {
            kind: pk,
            sigma: f.take("perturbation.sigma", dpert.sigma)?,
            epsilon: f.take("perturbation.epsilon", dpert.epsilon)?,
            steps: f.take("perturbation.steps", dpert.steps)?,
            eta: dpert.eta,
        };

        let train = TrainConfig {
            truncation: f.take("train.truncation", dt.truncation)?,
            stages: f.take_list("train.stages", dt.stages.clone())?,
            meta_epochs: f.take("train.meta_epochs", dt.meta_epochs)?,
            stage_cap: f.take("train.stage_cap", dt.stage_cap)?,
            patience: f.take("train.patience", dt.patience)?,
            validation_interval: f.take("train.validation_interval", dt.validation_interval)?,
            validation_seeds: f.take("train.validation_seeds", dt.validation_seeds)?,
            alpha: f.take("train.alpha", dt.alpha)?,
            meta_lr: f.take("train.meta_lr", dt.meta_lr)?,
            grad_clip: f.take("train.grad_clip", dt.grad_clip)?,
            warmup_steps: f.take("train.warmup_steps", dt.warmup_steps)?,
            warmup_lr: f.take("train.warmup_lr", dt.warmup_lr)?,
            random_scaling: f.take("train.random_scaling", dt.random_scaling)?,
            scale_log_bound: f.take("train.scale_log_bound", dt.scale_log_bound)?,
            reset_teachers: f.take("train.reset_teachers", dt.reset_teachers)?,
            seed: 0,
        };

        let config = Self {
            seed: f.take("seed", d.seed)?,
            out: PathBuf::from(f.take("out", d.out.display().to_string())?),
            replicates: f.take("replicates", d.replicates)?,
            evals_per_replicate: f.take("evals_per_replicate", d.evals_per_replicate)?,
            eval_epochs: f.take("eval_epochs", d.eval_epochs)?,
            mode: f.take("mode", d.mode)?,
            pool,
            pool_lr,
            grid: f.take_list("pool.grid", d.grid.clone())?,
            grid_epochs: f.take("pool.grid_epochs", d.grid_epochs)?,
            out_init: f.take("policy.out_init", d.out_init)?,
            problem_name: f.take("problem.name", kind.clone())?,
            problem,
            dp: dp_on.then_some(dp_cfg),
            perturbation,
            train,
            baselines: f.take("evaluate.baselines", d.baselines)?,
        };
        if let Some((key, (line, _))) = f.map.into_iter().next() {
            return Err(Error::Config {
                field: key,
                detail: format!("line {line}: unknown key"),
            });
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| {
            Err(Error::Config {
                field: field.into(),
                detail: detail.into(),
            })
        };
        if self.replicates == 0 {
            return bad("replicates", "must be at least 1");
        }
        if self.evals_per_replicate == 0 {
            return bad("evals_per_replicate", "must be at least 1");
        }
        if self.eval_epochs == 0 {
            return bad("eval_epochs", "must be at least 1");
        }
        if self.pool.is_empty() {
            return bad("pool", "must name at least one optimizer");
        }
        if self.grid.is_empty() || self.grid.iter().any(|&lr| !(lr > 0.0)) {
            return bad("pool.grid", "must list positive learning rates");
        }
        if self.grid_epochs == 0 {
            return bad("pool.grid_epochs", "must be at least 1");
        }
        if !(self.out_init >= 0.0) {
            return bad("policy.out_init", "must be non-negative");
        }
        if self.problem_name.is_empty() || self.problem_name.contains([',', '"', '\n']) {
            return bad("problem.name", "must be nonempty without commas or quotes");
        }
        if let Some(dp) = self.dp {
            if !(dp.clip_eps > 0.0) || !(dp.noise_ratio >= 0.0) {
                return bad("dp", "needs clip > 0 and noise >= 0");
            }
        }
        self.perturbation.validate().map_err(|e| Error::Config {
            field: "perturbation".into(),
            detail: e.to_string(),
        })?;
        self.train.validate()
    }

    /// Every setting, defaults included, in the file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("replicates", self.replicates.to_string());
        put("evals_per_replicate", self.evals_per_replicate.to_string());
        put("eval_epochs", self.eval_epochs.to_string());
        put("mode", self.mode.to_string());
        put("pool", join(&self.pool));
        for (k, lr) in &self.pool_lr {
            put(&format!("pool.lr.{k}"), lr.to_string());
        }
        put("pool.grid", join(&self.grid));
        put("pool.grid_epochs", self.grid_epochs.to_string());
        put("policy.out_init", self.out_init.to_string());
        put("problem.name", self.problem_name.clone());
        put("problem.kind", kind_name(&self.problem).into());
        match &self.problem {
            ProblemSpec::Quadratic { dim, conditioning } => {
                put("problem.dim", dim.to_string());
                put("problem.conditioning", conditioning.to_string());
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
                put("problem.hidden", hidden.to_string());
                put("problem.dim", dim.to_string());
                put("problem.classes", classes.to_string());
                put("problem.samples", samples.to_string());
                put("problem.separation", separation.to_string());
                put("problem.batch", batch.to_string());
                put("problem.data_seed", data_seed.to_string());
            }
            ProblemSpec::Mnist {
                model,
                dir,
                train,
                validation,
                batch,
            } => {
                match model {
                    MnistModel::Mlp { hidden } => put("problem.hidden", hidden.to_string()),
                    MnistModel::Cnn { channels } => put("problem.channels", join(channels)),
                }
                put("problem.dir", dir.display().to_string());
                put("problem.train", train.to_string());
                put("problem.validation", validation.to_string());
                put("problem.batch", batch.to_string());
            }
        }
        let dp = self.dp.unwrap_or_default();
        put("dp.enabled", self.dp.is_some().to_string());
        put("dp.clip", dp.clip_eps.to_string());
        put("dp.noise", dp.noise_ratio.to_string());
        put("perturbation.kind", self.perturbation.kind.to_string());
        put("perturbation.sigma", self.perturbation.sigma.to_string());
        put("perturbation.epsilon", self.perturbation.epsilon.to_string());
        put("perturbation.steps", self.perturbation.steps.to_string());
        let t = &self.train;
        put("train.truncation", t.truncation.to_string());
        put("train.stages", join(&t.stages));
        put("train.meta_epochs", t.meta_epochs.to_string());
        put("train.stage_cap", t.stage_cap.to_string());
        put("train.patience", t.patience.to_string());
        put("train.validation_interval", t.validation_interval.to_string());
        put("train.validation_seeds", t.validation_seeds.to_string());
        put("train.alpha", t.alpha.to_string());
        put("train.meta_lr", t.meta_lr.to_string());
        put("train.grad_clip", t.grad_clip.to_string());
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.warmup_lr", t.warmup_lr.to_string());
        put("train.random_scaling", t.random_scaling.to_string());
        put("train.scale_log_bound", t.scale_log_bound.to_string());
        put("train.reset_teachers", t.reset_teachers.to_string());
        put("evaluate.baselines", self.baselines.to_string());
        s
    }

    /// The problem with its data directory resolved: relative or empty
    /// directories are taken from `AMALGAM_DATA_DIR` when it is set.
    pub fn resolved_problem(&self) -> ProblemSpec {
        let mut spec = self.problem.clone();
        if let ProblemSpec::Mnist { dir, .. } = &mut spec {
            if let Some(root) = std::env::var_os(crate::harness::DATA_DIR_ENV) {
                if dir.is_relative() {
                    *dir = Path::new(&root).join(&*dir);
                }
            }
        }
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let d = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn reads_every_section() {
        let text = "
            seed = 7
            mode = min_max
            pool = adam, sgd
            pool.lr.sgd = 0.05   # fixed
            problem.kind = blobs
            problem.hidden = 0
            perturbation.kind = gaussian
            perturbation.sigma = 1e-3
            train.truncation = 10
            train.stages = 20, 40
            dp.enabled = true
        ";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.mode, AmalgamationKind::MinMax);
        assert_eq!(c.pool, vec![PoolKind::Adam, PoolKind::Sgd]);
        assert_eq!(c.pool_lr, vec![(PoolKind::Sgd, 0.05)]);
        assert_eq!(c.problem_name, "blobs");
        assert!(matches!(c.problem, ProblemSpec::Blobs { hidden: 0, .. }));
        assert_eq!(c.perturbation, PerturbationConfig::gaussian(1e-3));
        assert_eq!(c.train.stages, vec![20, 40]);
        assert_eq!(c.dp, Some(DpConfig::default()));
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("replicates = two"), "replicates");
        assert_eq!(field_of("train.truncation = 0"), "train.truncation");
        assert_eq!(field_of("train.truncation = 30"), "train.stages");
        assert_eq!(field_of("train.stages = 100, x"), "train.stages");
        assert_eq!(field_of("problem.kind = imagenet"), "problem.kind");
        assert_eq!(field_of("colour = blue"), "colour");
        assert_eq!(field_of("seed = 1\nseed = 2"), "seed");
        assert_eq!(field_of("just words"), "line 1");
        assert_eq!(field_of("pool.lr.sgd = 0.1"), "pool.lr.sgd");
        assert_eq!(field_of("problem.kind = blobs\nproblem.channels = 1,2"), "problem.channels");
        assert_eq!(field_of("perturbation.steps = 0"), "perturbation");
    }

    #[test]
    fn mnist_keys_round_trip() {
        let c = ExperimentConfig::parse("problem.kind = mnist-cnn\nproblem.channels = 32,64\nproblem.dir = mnist").unwrap();
        assert!(matches!(
            c.problem,
            ProblemSpec::Mnist {
                model: MnistModel::Cnn { channels: [32, 64] },
                ..
            }
        ));
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn effective_config_round_trips(
            seed in any::<u64>(),
            replicates in 1usize..9,
            meta_lr in 1e-6f64..1.0,
            alpha in 0.0f64..10.0,
            sigma in 0.0f64..1.0,
            trunc in 1usize..20,
            mult in proptest::collection::vec(1usize..6, 1..4),
        ) {
            let c = ExperimentConfig {
                seed,
                replicates,
                pool: PoolKind::large(),
                pool_lr: vec![(PoolKind::Momentum, meta_lr)],
                perturbation: PerturbationConfig::gaussian(sigma),
                train: TrainConfig {
                    truncation: trunc,
                    stages: mult.iter().scan(0, |acc, m| { *acc += m; Some(*acc * trunc) }).collect(),
                    meta_lr,
                    alpha,
                    ..TrainConfig::default()
                },
                ..ExperimentConfig::default()
            };
            prop_assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
