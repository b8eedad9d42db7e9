//! Experiment orchestration behind the `amalgam` command line.
//!
//! Commands talk to each other only through files in the output directory:
//!
//! | file | written by | columns |
//! |---|---|---|
//! | `effective.cfg` | every command | full configuration |
//! | `pool.csv` | train, evaluate | member, lr, key |
//! | `replicate-<i>/policy.ckpt` | train | student weights |
//! | `replicate-<i>/choice.ckpt` | train (optimal-choice) | choice teacher weights |
//! | `train_log.csv` | train | replicate, meta_epoch, stage, unroll, train_meta_loss, train_loss, validation_meta_loss, diverged |
//! | `train_summary.csv` | train | replicate, seed, final_unroll, final_validation |
//! | `evaluation.csv` | evaluate | replicate, eval, epoch, train_loss, val_loss, diverged |
//! | `baselines.csv` | evaluate (with baselines) | member, eval, epoch, train_loss, val_loss, diverged |
//! | `stability.csv` | stability | problem, metric, estimate, ci_low, ci_high, n_diverged |
//! | `report.svg` | report | |
//!
//! Every file is written to a temporary name and renamed into place.

pub mod checkpoint;
pub mod config;
pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::ExperimentConfig;

use crate::error::{Error, Result};
use crate::learned::{Policy, PoolPolicy, RnnProp};
use crate::optimizee::Family;
use crate::params::ParamSet;
use crate::perturbation::PerturbationConfig;
use crate::pool::PoolMember;
use crate::rollout::{grid_search_lr, train_epochs, warmup, RunOutcome};
use crate::seed;
use crate::stability::{
    mean_ci, optimization_stability_report, oracle_best, summarize_eval, variance_components, within_group_sd,
    EvaluationRecord, MemberRecords,
};
use crate::tensor::Tensor;
use crate::trainer::{train_choice_policy, train_truncated, AmalgamationKind, AmalgamationMode, Teacher, TrainConfig};

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "AMALGAM_DATA_DIR";

pub const EFFECTIVE_CONFIG: &str = "effective.cfg";
pub const POOL_CSV: &str = "pool.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const TRAIN_SUMMARY_CSV: &str = "train_summary.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const BASELINES_CSV: &str = "baselines.csv";
pub const STABILITY_CSV: &str = "stability.csv";
pub const REPORT_SVG: &str = "report.svg";

const EVAL_HEADER: [&str; 6] = ["replicate", "eval", "epoch", "train_loss", "val_loss", "diverged"];
const BASELINE_HEADER: [&str; 6] = ["member", "eval", "epoch", "train_loss", "val_loss", "diverged"];

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    seed::derive_named(master, "replicate", replicate as u64)
}

/// Evaluation instances are shared by all replicates and baselines.
pub fn evaluation_seed(master: u64, eval: usize) -> u64 {
    seed::derive_named(master, "evaluation", eval as u64)
}

pub fn replicate_dir(cfg: &ExperimentConfig, replicate: usize) -> PathBuf {
    cfg.out.join(format!("replicate-{replicate}"))
}

pub fn build_family(cfg: &ExperimentConfig) -> Result<Family> {
    Family::new(cfg.resolved_problem(), cfg.dp)
}

pub fn student_policy(cfg: &ExperimentConfig) -> RnnProp {
    RnnProp { out_init: cfg.out_init }
}

/// Training configuration of one replicate.
pub fn replicate_train_config(cfg: &ExperimentConfig, replicate: usize) -> TrainConfig {
    TrainConfig {
        seed: replicate_seed(cfg.seed, replicate),
        ..cfg.train.clone()
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Csv {
        line: e.position().map_or(0, |p| p.line()),
        detail: e.to_string(),
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

/// Rows of a CSV file with the given header, each with its line number.
fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => csv_error(e),
    })?;
    let found = reader.headers().map_err(csv_error)?.clone();
    if found.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(Error::Csv {
            line: 1,
            detail: format!("{}: expected header {}, found {}", path.display(), header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    reader
        .records()
        .map(|r| {
            let r = r.map_err(csv_error)?;
            Ok((r.position().map_or(0, |p| p.line()), r))
        })
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, line: u64, i: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Csv {
        line,
        detail: format!("missing column `{name}`"),
    })?;
    raw.trim().parse().map_err(|_| Error::Csv {
        line,
        detail: format!("bad value `{raw}` in column `{name}`"),
    })
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.into()
}

fn fingerprint(cfg: &ExperimentConfig) -> String {
    let relevant: String = cfg
        .to_text()
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            key == "seed" || key.starts_with("pool") || key.starts_with("problem.") || key.starts_with("dp.")
        })
        .collect::<Vec<_>>()
        .join("\n");
    let h = relevant
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    format!("{h:016x}")
}

fn read_pool_cache(path: &Path, cfg: &ExperimentConfig, key: &str) -> Option<Vec<PoolMember>> {
    let rows = read_csv(path, &["member", "lr", "key"]).ok()?;
    let members: Vec<PoolMember> = rows
        .iter()
        .map(|(line, r)| {
            let kind = field::<String>(r, *line, 0, "member")?.parse()?;
            let lr: f64 = field(r, *line, 1, "lr")?;
            let k: String = field(r, *line, 2, "key")?;
            if k != key {
                return Err(Error::Format("stale".into()));
            }
            Ok(PoolMember::new(kind, lr))
        })
        .collect::<Result<_>>()
        .ok()?;
    (members.iter().map(|m| m.kind).eq(cfg.pool.iter().copied())).then_some(members)
}

/// Pool members with tuned learning rates, read from `pool.csv` when it
/// was written for the same problem, pool and seed.
pub fn tuned_pool(cfg: &ExperimentConfig, family: &Family) -> Result<Vec<PoolMember>> {
    let path = cfg.out.join(POOL_CSV);
    let key = fingerprint(cfg);
    if let Some(pool) = read_pool_cache(&path, cfg, &key) {
        return Ok(pool);
    }
    let problem = family.instance(seed::derive_named(cfg.seed, "grid", 0))?;
    let grid_seed = seed::derive_named(cfg.seed, "grid", 1);
    let pool = cfg
        .pool
        .iter()
        .map(|&kind| match cfg.pool_lr.iter().find(|(k, _)| *k == kind) {
            Some(&(_, lr)) => Ok(PoolMember::new(kind, lr)),
            None => Ok(PoolMember {
                kind,
                hyper: grid_search_lr(kind, &problem, &cfg.grid, cfg.grid_epochs, grid_seed)?,
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = pool
        .iter()
        .map(|m| vec![m.kind.to_string(), m.hyper.lr.to_string(), key.clone()])
        .collect();
    write_csv(&path, &["member", "lr", "key"], &rows)?;
    Ok(pool)
}

fn write_effective_config(cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&cfg.out.join(EFFECTIVE_CONFIG), cfg.to_text().as_bytes())
}

/// Outcome of one meta-trained replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub replicate: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub final_unroll: usize,
    pub final_validation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub pool: Vec<PoolMember>,
    pub replicates: Vec<ReplicateSummary>,
}

/// Teachers for one replicate; optimal-choice trains its choice policy here.
fn amalgamation_mode(
    cfg: &ExperimentConfig,
    pool: &[PoolMember],
    family: &Family,
    train: &TrainConfig,
    dir: &Path,
) -> Result<AmalgamationMode> {
    match cfg.mode {
        AmalgamationKind::MetaOnly => Ok(AmalgamationMode::meta_only()),
        AmalgamationKind::Mean | AmalgamationKind::MinMax => {
            AmalgamationMode::new(cfg.mode, pool.iter().map(|&m| Teacher::pool(m)).collect())
        }
        AmalgamationKind::OptimalChoice => {
            let (choice, outcome) = train_choice_policy(pool, family, train, &PerturbationConfig::default())?;
            save_checkpoint(&outcome.params, dir.join("choice.ckpt"))?;
            AmalgamationMode::new(cfg.mode, vec![Teacher::choice(choice, outcome.params)])
        }
    }
}

/// Tunes the pool, meta-trains every replicate and writes checkpoints and logs.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    write_effective_config(cfg)?;
    let family = build_family(cfg)?;
    let pool = tuned_pool(cfg, &family)?;
    let policy = student_policy(cfg);
    let mut log_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut replicates = Vec::with_capacity(cfg.replicates);
    for r in 0..cfg.replicates {
        let train = replicate_train_config(cfg, r);
        let dir = replicate_dir(cfg, r);
        let mode = amalgamation_mode(cfg, &pool, &family, &train, &dir)?;
        let init = policy.init_params(seed::derive_named(train.seed, "policy-init", 0));
        let outcome = train_truncated(&policy, init, &mode, &family, &train, &cfg.perturbation)?;
        let checkpoint = dir.join("policy.ckpt");
        save_checkpoint(&outcome.params, &checkpoint)?;
        for rec in &outcome.log {
            log_rows.push(vec![
                r.to_string(),
                rec.meta_epoch.to_string(),
                rec.stage.to_string(),
                rec.unroll.to_string(),
                rec.train_meta_loss.to_string(),
                rec.train_loss.to_string(),
                rec.validation_meta_loss.map_or(String::new(), |v| v.to_string()),
                flag(rec.diverged),
            ]);
        }
        summary_rows.push(vec![
            r.to_string(),
            train.seed.to_string(),
            outcome.final_unroll.to_string(),
            outcome.final_validation.to_string(),
        ]);
        replicates.push(ReplicateSummary {
            replicate: r,
            seed: train.seed,
            checkpoint,
            final_unroll: outcome.final_unroll,
            final_validation: outcome.final_validation,
        });
    }
    write_csv(
        &cfg.out.join(TRAIN_LOG_CSV),
        &["replicate", "meta_epoch", "stage", "unroll", "train_meta_loss", "train_loss", "validation_meta_loss", "diverged"],
        &log_rows,
    )?;
    write_csv(
        &cfg.out.join(TRAIN_SUMMARY_CSV),
        &["replicate", "seed", "final_unroll", "final_validation"],
        &summary_rows,
    )?;
    Ok(TrainReport { pool, replicates })
}

/// Student weights of a replicate, checked against the student's layout.
pub fn load_student(cfg: &ExperimentConfig, replicate: usize) -> Result<ParamSet> {
    let path = replicate_dir(cfg, replicate).join("policy.ckpt");
    let params = load_checkpoint(&path)?;
    let expected = student_policy(cfg).init_params(0);
    let same = params.len() == expected.len()
        && params.iter().zip(expected.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if !same {
        return Err(Error::Format(format!("{} does not hold student weights", path.display())));
    }
    Ok(params)
}

/// Warmup followed by `cfg.eval_epochs` epochs of training on evaluation
/// instance `eval`. Divergence is recorded, not raised.
pub fn evaluate_run(policy: &dyn Policy, params: &ParamSet, family: &Family, cfg: &ExperimentConfig, eval: usize) -> Result<RunOutcome> {
    let es = evaluation_seed(cfg.seed, eval);
    let problem = family.instance(es)?;
    let theta0 = problem.init(es);
    let diverged = |theta: Tensor| RunOutcome {
        train: vec![f64::INFINITY; cfg.eval_epochs],
        validation: vec![f64::INFINITY; cfg.eval_epochs],
        diverged: true,
        theta,
    };
    let theta = match warmup(&problem, &theta0, cfg.train.warmup_steps, cfg.train.warmup_lr, es) {
        Ok(t) if t.all_finite() => t,
        Ok(t) => return Ok(diverged(t)),
        Err(Error::Divergence(_)) => return Ok(diverged(theta0)),
        Err(e) => return Err(e),
    };
    train_epochs(policy, params, &problem, &theta, cfg.eval_epochs, es)
}

fn run_rows(id: String, eval: usize, run: &RunOutcome) -> Vec<Vec<String>> {
    run.train
        .iter()
        .zip(&run.validation)
        .enumerate()
        .map(|(e, (t, v))| vec![id.clone(), eval.to_string(), (e + 1).to_string(), t.to_string(), v.to_string(), flag(run.diverged)])
        .collect()
}

/// Evaluates every replicate's checkpoint (and optionally each pool member)
/// on the shared evaluation instances. Returns the evaluation CSV path.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    write_effective_config(cfg)?;
    let family = build_family(cfg)?;
    let policy = student_policy(cfg);
    let mut rows = Vec::new();
    for r in 0..cfg.replicates {
        let params = load_student(cfg, r)?;
        for j in 0..cfg.evals_per_replicate {
            let run = evaluate_run(&policy, &params, &family, cfg, j)?;
            rows.extend(run_rows(r.to_string(), j, &run));
        }
    }
    let path = cfg.out.join(EVALUATION_CSV);
    write_csv(&path, &EVAL_HEADER, &rows)?;
    if cfg.baselines {
        let mut rows = Vec::new();
        for member in tuned_pool(cfg, &family)? {
            let policy = PoolPolicy(member);
            for j in 0..cfg.evals_per_replicate {
                let run = evaluate_run(&policy, &ParamSet::new(), &family, cfg, j)?;
                rows.extend(run_rows(member.kind.to_string(), j, &run));
            }
        }
        write_csv(&cfg.out.join(BASELINES_CSV), &BASELINE_HEADER, &rows)?;
    }
    Ok(path)
}

/// Groups per-epoch rows into records keyed by the first column.
fn group_rows(path: &Path, header: &[&str]) -> Result<Vec<(String, EvaluationRecord)>> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut records: BTreeMap<(String, usize), EvaluationRecord> = BTreeMap::new();
    for (line, rec) in read_csv(path, header)? {
        let id: String = field(&rec, line, 0, header[0])?;
        let eval: usize = field(&rec, line, 1, "eval")?;
        let epoch: usize = field(&rec, line, 2, "epoch")?;
        let train: f64 = field(&rec, line, 3, "train_loss")?;
        let val: f64 = field(&rec, line, 4, "val_loss")?;
        let diverged: u8 = field(&rec, line, 5, "diverged")?;
        if diverged > 1 {
            return Err(Error::Csv {
                line,
                detail: format!("diverged must be 0 or 1, got {diverged}"),
            });
        }
        let key = (id.clone(), eval);
        let entry = records.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            EvaluationRecord {
                replicate: 0,
                evaluation: eval,
                train: Vec::new(),
                validation: Vec::new(),
                diverged: false,
            }
        });
        if epoch != entry.train.len() + 1 {
            return Err(Error::Csv {
                line,
                detail: format!("expected epoch {}, found {epoch}", entry.train.len() + 1),
            });
        }
        entry.train.push(train);
        entry.validation.push(val);
        entry.diverged |= diverged == 1;
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let rec = records.remove(&k).expect("grouped");
            (k.0, rec)
        })
        .collect())
}

pub fn read_evaluations(path: &Path) -> Result<Vec<EvaluationRecord>> {
    group_rows(path, &EVAL_HEADER)?
        .into_iter()
        .map(|(id, mut rec)| {
            rec.replicate = id.parse().map_err(|_| Error::Csv {
                line: 0,
                detail: format!("replicate id `{id}` is not an integer"),
            })?;
            Ok(rec)
        })
        .collect()
}

pub fn read_baselines(path: &Path) -> Result<Vec<MemberRecords>> {
    let mut members: Vec<MemberRecords> = Vec::new();
    for (id, rec) in group_rows(path, &BASELINE_HEADER)? {
        match members.iter_mut().find(|m| m.member == id) {
            Some(m) => m.records.push(rec),
            None => members.push(MemberRecords {
                member: id,
                records: vec![rec],
            }),
        }
    }
    Ok(members)
}

/// One line of the stability report. `None` marks a quantity that cannot be
/// estimated from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub problem: String,
    pub metric: String,
    pub estimate: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub n_diverged: usize,
}

/// Stability metrics of one set of evaluation records.
pub fn stability_rows(problem: &str, records: &[EvaluationRecord], baselines: &[MemberRecords]) -> Result<Vec<StabilityRow>> {
    if records.is_empty() {
        return Err(Error::NoData("no evaluation records".into()));
    }
    let mut replicates: Vec<usize> = records.iter().map(|r| r.replicate).collect();
    replicates.sort_unstable();
    replicates.dedup();
    let mut evals: Vec<usize> = records.iter().map(|r| r.evaluation).collect();
    evals.sort_unstable();
    evals.dedup();
    let summaries: Vec<_> = records
        .iter()
        .map(|r| Ok((r.replicate, r.evaluation, summarize_eval(r, true)?)))
        .collect::<Result<_>>()?;
    let n_diverged = summaries.iter().filter(|s| !s.2.is_finite()).count();
    // keep the evaluation instances no replicate diverged on, so the design stays balanced
    let kept: Vec<usize> = evals
        .iter()
        .copied()
        .filter(|&j| {
            replicates.iter().all(|&i| {
                summaries
                    .iter()
                    .any(|s| s.0 == i && s.1 == j && s.2.is_finite())
            })
        })
        .collect();
    let row = |metric: &str, estimate: Option<f64>, ci: Option<(f64, f64)>| StabilityRow {
        problem: problem.into(),
        metric: metric.into(),
        estimate,
        ci,
        n_diverged,
    };
    let mut rows = Vec::new();
    for (name, pick) in [
        ("best_val_loss", (|s: &crate::stability::EvalSummary| s.best_validation) as fn(&_) -> f64),
        ("final_train_loss", |s| s.final_train),
    ] {
        let groups: Vec<Vec<f64>> = replicates
            .iter()
            .map(|&i| {
                kept.iter()
                    .map(|&j| {
                        let s = summaries.iter().find(|s| s.0 == i && s.1 == j).expect("kept");
                        pick(&s.2)
                    })
                    .collect()
            })
            .collect();
        if kept.is_empty() {
            rows.push(row(&format!("{name}.mean"), None, None));
            rows.push(row(&format!("{name}.meta_stability"), None, None));
            rows.push(row(&format!("{name}.evaluation_stability"), None, None));
            continue;
        }
        if groups.len() >= 2 && kept.len() >= 2 {
            let m = variance_components(&groups)?;
            rows.push(row(&format!("{name}.mean"), Some(m.mu), Some(m.mu_ci)));
            rows.push(row(&format!("{name}.meta_stability"), Some(m.sigma_alpha), None));
            rows.push(row(&format!("{name}.evaluation_stability"), Some(m.sigma_eps), None));
        } else {
            let all: Vec<f64> = groups.iter().flatten().copied().collect();
            let (mu, lo, hi) = mean_ci(&all)?;
            rows.push(row(&format!("{name}.mean"), Some(mu), lo.is_finite().then_some((lo, hi))));
            rows.push(row(&format!("{name}.meta_stability"), None, None));
            let eps = (kept.len() >= 2).then(|| within_group_sd(&groups)).transpose()?;
            rows.push(row(&format!("{name}.evaluation_stability"), eps, None));
        }
    }
    match optimization_stability_report(records) {
        Ok(r) => rows.push(row("optimization_stability", Some(r.mean), r.ci.0.is_finite().then_some(r.ci))),
        Err(Error::NoData(_)) | Err(Error::InvalidArgument(_)) => rows.push(row("optimization_stability", None, None)),
        Err(e) => return Err(e),
    }
    if !baselines.is_empty() {
        match oracle_best(baselines) {
            Ok(i) => {
                let score = crate::stability::member_score(&baselines[i])?;
                rows.push(row(&format!("oracle.{}", baselines[i].member), Some(score.ln()), None));
            }
            Err(Error::Divergence(_)) => rows.push(row("oracle", None, None)),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Reads the evaluation CSV (and baselines, if present) and writes the
/// stability report.
pub fn cmd_stability(cfg: &ExperimentConfig) -> Result<PathBuf> {
    write_effective_config(cfg)?;
    let records = read_evaluations(&cfg.out.join(EVALUATION_CSV))?;
    let baselines_path = cfg.out.join(BASELINES_CSV);
    let baselines = if baselines_path.exists() {
        read_baselines(&baselines_path)?
    } else {
        Vec::new()
    };
    let rows = stability_rows(&cfg.problem_name, &records, &baselines)?;
    let na = |x: Option<f64>| x.map_or("NA".to_string(), |v| v.to_string());
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.problem.clone(),
                r.metric.clone(),
                na(r.estimate),
                na(r.ci.map(|c| c.0)),
                na(r.ci.map(|c| c.1)),
                r.n_diverged.to_string(),
            ]
        })
        .collect();
    let path = cfg.out.join(STABILITY_CSV);
    write_csv(&path, &["problem", "metric", "estimate", "ci_low", "ci_high", "n_diverged"], &out)?;
    Ok(path)
}

/// Per-epoch mean and two standard deviations of log10 losses across the
/// finite records.
pub fn band_series(label: &str, records: &[&EvaluationRecord], validation: bool) -> svg::Series {
    let curves: Vec<&Vec<f64>> = records
        .iter()
        .filter(|r| !r.diverged)
        .map(|r| if validation { &r.validation } else { &r.train })
        .filter(|c| c.iter().all(|x| x.is_finite() && *x > 0.0))
        .collect();
    let epochs = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    let (mut mean, mut band) = (Vec::with_capacity(epochs), Vec::with_capacity(epochs));
    for e in 0..epochs {
        let xs: Vec<f64> = curves.iter().map(|c| c[e].log10()).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        } else {
            0.0
        };
        mean.push(m);
        band.push(2.0 * var.sqrt());
    }
    svg::Series {
        label: label.into(),
        mean,
        band: Some(band),
    }
}

/// Training and validation loss curves with two-standard-deviation bands.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    write_effective_config(cfg)?;
    let records = read_evaluations(&cfg.out.join(EVALUATION_CSV))?;
    if records.is_empty() {
        return Err(Error::NoData("no evaluation records".into()));
    }
    let baselines_path = cfg.out.join(BASELINES_CSV);
    let baselines = if baselines_path.exists() {
        read_baselines(&baselines_path)?
    } else {
        Vec::new()
    };
    let panels: Vec<svg::Panel> = [(false, "training loss"), (true, "validation loss")]
        .into_iter()
        .map(|(validation, what)| {
            let mut series = vec![band_series("amalgamated", &records.iter().collect::<Vec<_>>(), validation)];
            for m in &baselines {
                series.push(band_series(&m.member, &m.records.iter().collect::<Vec<_>>(), validation));
            }
            svg::Panel {
                title: format!("{}: {what}", cfg.problem_name),
                y_label: format!("log10 {what}"),
                series,
            }
        })
        .collect();
    let path = cfg.out.join(REPORT_SVG);
    write_atomic(&path, svg::render(&panels).as_bytes())?;
    Ok(path)
}
