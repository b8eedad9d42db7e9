use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor inside the log-distance so coincident trajectories stay finite.
pub const DISTILL_EPS: f64 = 1e-12;

/// One optimizer's path over a stretch of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tag: String,
    /// `theta_1 ..= theta_t`.
    pub params_at_step: Vec<Tensor>,
    /// `M(x_i, theta_i)`.
    pub losses_at_step: Vec<f64>,
    /// `M(x_i, theta_0)`.
    pub initial_losses: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.params_at_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params_at_step.is_empty()
    }
}

/// How the distillation term combines teachers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmalgamationKind {
    /// No teachers; meta loss only.
    MetaOnly,
    Mean,
    MinMax,
    OptimalChoice,
}

impl AmalgamationKind {
    pub fn name(self) -> &'static str {
        match self {
            AmalgamationKind::MetaOnly => "meta-only",
            AmalgamationKind::Mean => "mean",
            AmalgamationKind::MinMax => "min-max",
            AmalgamationKind::OptimalChoice => "optimal-choice",
        }
    }
}

impl fmt::Display for AmalgamationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AmalgamationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        [
            AmalgamationKind::MetaOnly,
            AmalgamationKind::Mean,
            AmalgamationKind::MinMax,
            AmalgamationKind::OptimalChoice,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown amalgamation mode `{s}`")))
    }
}

/// Mean over steps of `log M(x_i, theta_i) - log M(x_i, theta_0)`.
pub fn meta_loss(traj: &Trajectory) -> Result<f64> {
    if traj.losses_at_step.len() != traj.initial_losses.len() || traj.losses_at_step.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "meta loss needs matching nonempty loss lists ({} vs {})",
            traj.losses_at_step.len(),
            traj.initial_losses.len()
        )));
    }
    let mut total = 0.0;
    for (&l, &l0) in traj.losses_at_step.iter().zip(&traj.initial_losses) {
        if !(l > 0.0) || !(l0 > 0.0) {
            return Err(Error::Domain {
                op: "meta_loss",
                detail: format!("log of non-positive loss ({l}, {l0})"),
            });
        }
        total += l.ln() - l0.ln();
    }
    Ok(total / traj.losses_at_step.len() as f64)
}

/// Per-step `log(|theta_P - theta_T| + eps)`.
pub fn log_distances(student: &Trajectory, teacher: &Trajectory) -> Result<Vec<f64>> {
    if student.len() != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectories differ in length ({} vs {})",
            student.len(),
            teacher.len()
        )));
    }
    student
        .params_at_step
        .iter()
        .zip(&teacher.params_at_step)
        .map(|(p, t)| Ok((p.zip_map(t, |a, b| a - b)?.l2_norm() + DISTILL_EPS).ln()))
        .collect()
}

/// Mean over steps of the log-distance between student and teacher.
pub fn distill_loss(student: &Trajectory, teacher: &Trajectory) -> Result<f64> {
    let d = log_distances(student, teacher)?;
    if d.is_empty() {
        return Err(Error::InvalidArgument("empty trajectories".into()));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Combines per-teacher, per-step log-distances `[teacher][step]`.
pub fn distill_term(kind: AmalgamationKind, distances: &[Vec<f64>]) -> Result<f64> {
    if kind == AmalgamationKind::MetaOnly {
        return Ok(0.0);
    }
    let steps = distances.first().map_or(0, Vec::len);
    if steps == 0 || distances.iter().any(|d| d.len() != steps) {
        return Err(Error::InvalidArgument("distillation needs aligned nonempty teacher distances".into()));
    }
    if kind == AmalgamationKind::OptimalChoice && distances.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "optimal-choice amalgamation takes exactly one teacher, got {}",
            distances.len()
        )));
    }
    let per_step = (0..steps).map(|i| {
        let column = distances.iter().map(|d| d[i]);
        match kind {
            AmalgamationKind::MinMax => column.fold(f64::NEG_INFINITY, f64::max),
            _ => column.sum::<f64>() / distances.len() as f64,
        }
    });
    Ok(per_step.sum::<f64>() / steps as f64)
}

/// `meta_loss(student) + alpha * distillation term`.
pub fn amalgamation_loss(kind: AmalgamationKind, student: &Trajectory, teachers: &[Trajectory], alpha: f64) -> Result<f64> {
    let meta = meta_loss(student)?;
    if kind == AmalgamationKind::MetaOnly || alpha == 0.0 {
        return Ok(meta);
    }
    if teachers.is_empty() {
        return Err(Error::InvalidArgument(format!("{kind} amalgamation needs teachers")));
    }
    let distances = teachers
        .iter()
        .map(|t| log_distances(student, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(meta + alpha * distill_term(kind, &distances)?)
}

/// Taped form of [`amalgamation_loss`]: `thetas` and `losses` are the
/// student's per-step nodes, `teachers[j][i]` the constant teacher snapshots.
/// Returns `(total, meta part)`.
pub(crate) fn amalgamation_loss_taped(
    tape: &mut Tape,
    kind: AmalgamationKind,
    thetas: &[Var],
    losses: &[Var],
    initial_losses: &[f64],
    teachers: &[Vec<Tensor>],
    alpha: f64,
) -> Result<(Var, Var)> {
    let n = losses.len() as f64;
    let mut meta_terms = Vec::with_capacity(losses.len());
    for (&l, &l0) in losses.iter().zip(initial_losses) {
        let log = tape.log(l)?;
        meta_terms.push(tape.add_const(log, -l0.ln())?);
    }
    let meta = sum_vars(tape, &meta_terms)?;
    let meta = tape.scale(meta, 1.0 / n)?;
    if kind == AmalgamationKind::MetaOnly || alpha == 0.0 || teachers.is_empty() {
        return Ok((meta, meta));
    }
    // distances[j][i]
    let mut distances: Vec<Vec<Var>> = Vec::with_capacity(teachers.len());
    for snapshots in teachers {
        let mut row = Vec::with_capacity(thetas.len());
        for (&theta, snap) in thetas.iter().zip(snapshots) {
            let t = tape.leaf(snap.clone());
            let diff = tape.sub(theta, t)?;
            let norm = tape.l2_norm(diff)?;
            let shifted = tape.add_const(norm, DISTILL_EPS)?;
            row.push(tape.log(shifted)?);
        }
        distances.push(row);
    }
    let mut per_step = Vec::with_capacity(thetas.len());
    for i in 0..thetas.len() {
        let term = match kind {
            AmalgamationKind::MinMax => {
                let worst = distances
                    .iter()
                    .map(|row| row[i])
                    .max_by(|&a, &b| tape.value(a).item().total_cmp(&tape.value(b).item()))
                    .expect("nonempty teachers");
                worst
            }
            _ => {
                let column: Vec<Var> = distances.iter().map(|row| row[i]).collect();
                let s = sum_vars(tape, &column)?;
                tape.scale(s, 1.0 / teachers.len() as f64)?
            }
        };
        per_step.push(term);
    }
    let distill = sum_vars(tape, &per_step)?;
    let distill = tape.scale(distill, alpha / n)?;
    Ok((tape.add(meta, distill)?, meta))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::E;

    fn traj(losses: Vec<f64>, initial: Vec<f64>, params: Vec<Vec<f64>>) -> Trajectory {
        Trajectory {
            tag: "t".into(),
            params_at_step: params.into_iter().map(Tensor::vector).collect(),
            losses_at_step: losses,
            initial_losses: initial,
        }
    }

    #[test]
    fn meta_loss_examples() {
        let same = traj(vec![3.0, 2.0], vec![3.0, 2.0], vec![vec![0.0]; 2]);
        assert_eq!(meta_loss(&same).unwrap(), 0.0);
        let halved = traj(vec![1.0, 2.0, 0.25], vec![2.0, 4.0, 0.5], vec![vec![0.0]; 3]);
        assert_abs_diff_eq!(meta_loss(&halved).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        let hand = traj(vec![2.0, 1.0, 0.5], vec![4.0; 3], vec![vec![0.0]; 3]);
        let expected = ((2.0f64 / 4.0).ln() + (1.0f64 / 4.0).ln() + (0.5f64 / 4.0).ln()) / 3.0;
        assert_abs_diff_eq!(meta_loss(&hand).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(meta_loss(&hand).unwrap(), -1.3863, epsilon = 1e-4);
        let bad = traj(vec![0.0], vec![1.0], vec![vec![0.0]]);
        assert!(matches!(meta_loss(&bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn meta_loss_ignores_a_common_loss_scale() {
        let a = traj(vec![2.0, 1.0, 0.5], vec![4.0, 3.0, 2.0], vec![vec![0.0]; 3]);
        let scaled = traj(vec![14.0, 7.0, 3.5], vec![28.0, 21.0, 14.0], vec![vec![0.0]; 3]);
        assert_abs_diff_eq!(meta_loss(&a).unwrap(), meta_loss(&scaled).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn distill_loss_examples() {
        let s = traj(vec![1.0; 2], vec![1.0; 2], vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let unit = traj(vec![1.0; 2], vec![1.0; 2], vec![vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert_abs_diff_eq!(distill_loss(&s, &unit).unwrap(), 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(distill_loss(&s, &s).unwrap(), DISTILL_EPS.ln(), epsilon = 1e-12);
        let far = traj(vec![1.0; 2], vec![1.0; 2], vec![vec![1.0 - E, 0.0], vec![0.0, 2.0 + E * E]]);
        assert_abs_diff_eq!(distill_loss(&s, &far).unwrap(), 1.5, epsilon = 1e-11);
    }

    #[test]
    fn mode_examples() {
        let d = vec![vec![0.0], vec![1.0]];
        assert_abs_diff_eq!(distill_term(AmalgamationKind::Mean, &d).unwrap(), 0.5);
        assert_abs_diff_eq!(distill_term(AmalgamationKind::MinMax, &d).unwrap(), 1.0);
        let one = vec![vec![0.3, -2.0]];
        assert_eq!(
            distill_term(AmalgamationKind::Mean, &one).unwrap(),
            distill_term(AmalgamationKind::MinMax, &one).unwrap()
        );
        assert!(distill_term(AmalgamationKind::OptimalChoice, &d).is_err());
    }

    #[test]
    fn taped_loss_matches_value_form() {
        let student = traj(vec![0.8, 0.5], vec![1.0, 0.9], vec![vec![0.2, 0.1], vec![0.05, 0.3]]);
        let t1 = traj(vec![1.0; 2], vec![1.0; 2], vec![vec![0.0, 0.0], vec![0.1, 0.1]]);
        let t2 = traj(vec![1.0; 2], vec![1.0; 2], vec![vec![0.5, -0.1], vec![0.05, 0.3]]);
        for kind in [AmalgamationKind::Mean, AmalgamationKind::MinMax, AmalgamationKind::MetaOnly] {
            let mut tape = Tape::new();
            let thetas: Vec<Var> = student.params_at_step.iter().map(|p| tape.leaf(p.clone())).collect();
            let losses: Vec<Var> = student.losses_at_step.iter().map(|&l| tape.scalar(l)).collect();
            let snaps = vec![t1.params_at_step.clone(), t2.params_at_step.clone()];
            let (total, meta) =
                amalgamation_loss_taped(&mut tape, kind, &thetas, &losses, &student.initial_losses, &snaps, 0.7).unwrap();
            let expected = amalgamation_loss(kind, &student, &[t1.clone(), t2.clone()], 0.7).unwrap();
            assert_abs_diff_eq!(tape.value(total).item(), expected, epsilon = 1e-14);
            assert_abs_diff_eq!(tape.value(meta).item(), meta_loss(&student).unwrap(), epsilon = 1e-14);
        }
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("min_max".parse::<AmalgamationKind>().unwrap(), AmalgamationKind::MinMax);
        assert_eq!("Optimal-Choice".parse::<AmalgamationKind>().unwrap(), AmalgamationKind::OptimalChoice);
        assert!("best".parse::<AmalgamationKind>().is_err());
    }
}
