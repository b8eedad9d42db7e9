//! Stability measures of trained optimizers: smoothing residuals of a loss
//! curve, one-way variance components across replicates, and the oracle
//! pool member.

use crate::error::{Error, Result};

/// Standard deviation of the Gaussian filter, in epochs.
pub const SMOOTHING_SIGMA: f64 = 2.0;
/// Kernel radius in standard deviations.
pub const SMOOTHING_TRUNCATE: f64 = 4.0;

/// One evaluation run of one replicate. Epoch `e` (1-based) lives at index `e - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub replicate: usize,
    pub evaluation: usize,
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    pub diverged: bool,
}

impl EvaluationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.train.len() != self.validation.len() {
            return Err(Error::InvalidArgument(format!(
                "record ({}, {}): curves must be nonempty and of equal length ({} vs {})",
                self.replicate,
                self.evaluation,
                self.train.len(),
                self.validation.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub best_validation: f64,
    pub final_train: f64,
}

impl EvalSummary {
    pub fn is_finite(&self) -> bool {
        self.best_validation.is_finite() && self.final_train.is_finite()
    }
}

/// Best validation loss and last training loss of a record, optionally as
/// natural logs. A diverged record (or one with a non-finite value) yields
/// `+inf` for both.
pub fn summarize_eval(record: &EvaluationRecord, log_space: bool) -> Result<EvalSummary> {
    record.validate()?;
    let inf = EvalSummary {
        best_validation: f64::INFINITY,
        final_train: f64::INFINITY,
    };
    if record.diverged || record.validation.iter().chain(&record.train).any(|x| !x.is_finite()) {
        return Ok(inf);
    }
    let best = record.validation.iter().copied().fold(f64::INFINITY, f64::min);
    let last = *record.train.last().expect("nonempty");
    let f = |x: f64| if log_space { x.ln() } else { x };
    Ok(EvalSummary {
        best_validation: f(best),
        final_train: f(last),
    })
}

/// Fitted one-way random-effects model `y_ij = mu + a_i + e_ij`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityModel {
    pub mu: f64,
    /// Between-group standard deviation.
    pub sigma_alpha: f64,
    /// Within-group standard deviation.
    pub sigma_eps: f64,
    /// `sigma_alpha^2` before the square root, kept exact.
    pub var_alpha: f64,
    pub var_eps: f64,
    /// 95% interval for `mu` from the between-group mean square.
    pub mu_ci: (f64, f64),
}

fn check_balanced(groups: &[Vec<f64>], min_groups: usize) -> Result<usize> {
    if groups.len() < min_groups {
        return Err(Error::InvalidArgument(format!(
            "need at least {min_groups} groups, got {}",
            groups.len()
        )));
    }
    let n = groups[0].len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 observations per group, got {n}")));
    }
    if let Some(g) = groups.iter().position(|g| g.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "unbalanced design: group 0 has {n} observations, group {g} has {}",
            groups[g].len()
        )));
    }
    if groups.iter().flatten().any(|y| !y.is_finite()) {
        return Err(Error::InvalidArgument("observations must be finite".into()));
    }
    Ok(n)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pooled within-group mean square of a balanced design.
fn within_mean_square(groups: &[Vec<f64>], n: usize) -> f64 {
    let ss: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|y| (y - m).powi(2)).sum::<f64>()
        })
        .sum();
    ss / (groups.len() * (n - 1)) as f64
}

/// Within-group standard deviation. Unlike [`variance_components`] this
/// accepts a single group.
pub fn within_group_sd(groups: &[Vec<f64>]) -> Result<f64> {
    let n = check_balanced(groups, 1)?;
    Ok(within_mean_square(groups, n).sqrt())
}

/// Method-of-moments one-way ANOVA on `k` groups of `n` observations.
pub fn variance_components(groups: &[Vec<f64>]) -> Result<StabilityModel> {
    let n = check_balanced(groups, 2)?;
    let k = groups.len();
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let mu = mean(&means);
    let msb = n as f64 * means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (k - 1) as f64;
    let msw = within_mean_square(groups, n);
    let var_alpha = ((msb - msw) / n as f64).max(0.0);
    let half = t_critical(k - 1) * (msb / (k * n) as f64).sqrt();
    Ok(StabilityModel {
        mu,
        sigma_alpha: var_alpha.sqrt(),
        sigma_eps: msw.sqrt(),
        var_alpha,
        var_eps: msw,
        mu_ci: (mu - half, mu + half),
    })
}

/// Two-sided 97.5% quantile of Student's t with `df` degrees of freedom.
pub fn t_critical(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
        2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    match df {
        0 => f64::INFINITY,
        1..=30 => TABLE[df - 1],
        _ => {
            // Cornish-Fisher expansion around the normal quantile
            let z: f64 = 1.959_963_984_540_054;
            let v = df as f64;
            z + (z.powi(3) + z) / (4.0 * v) + (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * v * v)
        }
    }
}

/// Sample mean with a 95% t-interval. A single value gets an unbounded interval.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::NoData("no values to average".into()));
    }
    let m = mean(values);
    if values.len() == 1 {
        return Ok((m, f64::NEG_INFINITY, f64::INFINITY));
    }
    let n = values.len() as f64;
    let var = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    let half = t_critical(values.len() - 1) * (var / n).sqrt();
    Ok((m, m - half, m + half))
}

/// Normalized Gaussian weights at offsets `-r..=r`, `r = round(truncate * sigma)`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    let r = (truncate * sigma + 0.5) as i64;
    let raw: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Gaussian-filtered curve, padding past either end with the edge value.
pub fn gaussian_smooth(curve: &[f64], sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma, SMOOTHING_TRUNCATE);
    let r = (kernel.len() / 2) as i64;
    let last = curve.len() as i64 - 1;
    (0..curve.len() as i64)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * curve[(t + j as i64 - r).clamp(0, last) as usize])
                .sum()
        })
        .collect()
}

/// Standard deviation of the residuals `L(t) - smooth(L)(t)`.
pub fn optimization_stability(curve: &[f64]) -> Result<f64> {
    if curve.len() < 5 {
        return Err(Error::InvalidArgument(format!("curve needs at least 5 epochs, got {}", curve.len())));
    }
    if curve.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("curve must be finite".into()));
    }
    let smooth = gaussian_smooth(curve, SMOOTHING_SIGMA);
    let residuals: Vec<f64> = curve.iter().zip(&smooth).map(|(l, b)| l - b).collect();
    let m = mean(&residuals);
    let var = residuals.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (residuals.len() - 1) as f64;
    Ok(var.sqrt())
}

/// Per-evaluation residual deviations of the validation curves, and their
/// mean with an interval over replicate means.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationStabilityReport {
    /// `(replicate, evaluation, sigma_eta)` for each non-diverged record.
    pub per_evaluation: Vec<(usize, usize, f64)>,
    pub mean: f64,
    pub ci: (f64, f64),
    pub n_diverged: usize,
}

pub fn optimization_stability_report(records: &[EvaluationRecord]) -> Result<OptimizationStabilityReport> {
    let mut per_evaluation = Vec::new();
    let mut n_diverged = 0;
    for r in records {
        r.validate()?;
        if r.diverged || r.validation.iter().any(|x| !x.is_finite()) {
            n_diverged += 1;
            continue;
        }
        per_evaluation.push((r.replicate, r.evaluation, optimization_stability(&r.validation)?));
    }
    if per_evaluation.is_empty() {
        return Err(Error::NoData("every evaluation diverged".into()));
    }
    let mut replicates: Vec<usize> = per_evaluation.iter().map(|p| p.0).collect();
    replicates.sort_unstable();
    replicates.dedup();
    let replicate_means: Vec<f64> = replicates
        .iter()
        .map(|&i| {
            let xs: Vec<f64> = per_evaluation.iter().filter(|p| p.0 == i).map(|p| p.2).collect();
            mean(&xs)
        })
        .collect();
    let (_, lo, hi) = mean_ci(&replicate_means)?;
    let all: Vec<f64> = per_evaluation.iter().map(|p| p.2).collect();
    Ok(OptimizationStabilityReport {
        mean: mean(&all),
        ci: (lo, hi),
        per_evaluation,
        n_diverged,
    })
}

/// Evaluation records of one pool member on one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberRecords {
    pub member: String,
    pub records: Vec<EvaluationRecord>,
}

/// Mean best validation loss over a member's records; `+inf` if any diverged.
pub fn member_score(member: &MemberRecords) -> Result<f64> {
    if member.records.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0;
    for r in &member.records {
        total += summarize_eval(r, false)?.best_validation;
    }
    Ok(total / member.records.len() as f64)
}

/// Index of the member with the lowest [`member_score`]. Ties go to the
/// earlier member.
pub fn oracle_best(members: &[MemberRecords]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in members.iter().enumerate() {
        let s = member_score(m)?;
        if s.is_finite() && best.map_or(true, |(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Divergence("every pool member diverged".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn record(train: Vec<f64>, validation: Vec<f64>) -> EvaluationRecord {
        EvaluationRecord {
            replicate: 0,
            evaluation: 0,
            train,
            validation,
            diverged: false,
        }
    }

    #[test]
    fn summary_takes_best_validation_and_last_train() {
        let s = summarize_eval(&record(vec![5.0, 4.0, 4.5], vec![3.0, 1.0, 2.0]), false).unwrap();
        assert_eq!(s.best_validation, 1.0);
        assert_eq!(s.final_train, 4.5);
        let mono = summarize_eval(&record(vec![3.0, 2.0, 1.0], vec![3.0, 2.0, 1.0]), true).unwrap();
        assert_eq!(mono.best_validation, 0.0);
        let mut d = record(vec![1.0], vec![1.0]);
        d.diverged = true;
        assert!(!summarize_eval(&d, false).unwrap().is_finite());
        assert!(summarize_eval(&record(vec![1.0], vec![]), false).is_err());
    }

    #[test]
    fn hand_anova() {
        let m = variance_components(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(m.sigma_eps, 0.0);
        assert_eq!((m.var_alpha, m.var_eps), (2.0, 0.0));
        assert_eq!(m.sigma_alpha, 2f64.sqrt());
        assert_eq!(m.mu, 2.0);
        // between-group standard error sqrt(4/4) = 1, t(1) = 12.706
        assert_abs_diff_eq!(m.mu_ci.1, 2.0 + 12.706, epsilon = 1e-12);
    }

    #[test]
    fn constant_observations_have_no_variance() {
        let m = variance_components(&vec![vec![0.7; 4]; 3]).unwrap();
        assert_abs_diff_eq!(m.mu, 0.7, epsilon = 1e-15);
        assert!(m.sigma_alpha < 1e-15 && m.sigma_eps < 1e-15, "{m:?}");
    }

    #[test]
    fn negative_between_estimate_is_clamped() {
        // group means equal, all spread is within groups
        let m = variance_components(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(m.sigma_alpha, 0.0);
        assert!(m.sigma_eps > 0.0);
    }

    #[test]
    fn rejects_bad_designs() {
        assert!(variance_components(&[vec![1.0, 2.0]]).is_err());
        assert!(variance_components(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(variance_components(&[vec![1.0], vec![1.0]]).is_err());
        assert!(variance_components(&[vec![1.0, f64::NAN], vec![1.0, 1.0]]).is_err());
        assert_eq!(within_group_sd(&[vec![1.0, 3.0]]).unwrap(), 2f64.sqrt());
    }

    #[test]
    fn recovers_simulated_components() {
        let mut rng = crate::seed::rng(2024);
        let alpha = Normal::new(0.0, 1.0).unwrap();
        let eps = Normal::new(0.0, 0.5).unwrap();
        let groups: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let a = alpha.sample(&mut rng);
                (0..10).map(|_| 3.0 + a + eps.sample(&mut rng)).collect()
            })
            .collect();
        let m = variance_components(&groups).unwrap();
        assert!((m.sigma_alpha - 1.0).abs() <= 0.3, "{m:?}");
        assert!((m.sigma_eps - 0.5).abs() <= 0.15, "{m:?}");
        assert!(m.mu_ci.0 < m.mu && m.mu < m.mu_ci.1);
    }

    #[test]
    fn t_quantiles() {
        assert_eq!(t_critical(1), 12.706);
        assert_eq!(t_critical(30), 2.042);
        // tabulated values at 40, 60 and 120
        assert_abs_diff_eq!(t_critical(40), 2.021, epsilon = 1e-3);
        assert_abs_diff_eq!(t_critical(60), 2.000, epsilon = 1e-3);
        assert_abs_diff_eq!(t_critical(120), 1.980, epsilon = 1e-3);
        assert!(t_critical(0).is_infinite());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(2.0, 4.0);
        assert_eq!(k.len(), 17);
        assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn smoothing_matches_direct_scan() {
        let curve: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64).collect();
        let smooth = gaussian_smooth(&curve, 2.0);
        let w = |k: i64| (-(k * k) as f64 / 8.0).exp();
        let total: f64 = (-8..=8).map(w).sum();
        for t in 0..12i64 {
            let mut acc = 0.0;
            for k in -8..=8i64 {
                let idx = (t + k).max(0).min(11) as usize;
                acc += w(k) * curve[idx];
            }
            assert_abs_diff_eq!(smooth[t as usize], acc / total, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_curves_are_stable() {
        assert_eq!(optimization_stability(&[0.3; 25]).unwrap(), 0.0);
        assert!(optimization_stability(&[1.0; 4]).is_err());
    }

    #[test]
    fn recovers_injected_noise() {
        let mut rng = crate::seed::rng(11);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let curve: Vec<f64> = (0..100)
            .map(|t| {
                let x = t as f64 / 100.0;
                2.0 - 1.5 * x + 0.8 * x * x + noise.sample(&mut rng)
            })
            .collect();
        let s = optimization_stability(&curve).unwrap();
        assert!((s - 0.1).abs() <= 0.02, "{s}");
    }

    #[test]
    fn oracle_is_the_argmin() {
        let member = |name: &str, best: f64| MemberRecords {
            member: name.into(),
            records: vec![record(vec![1.0, 1.0], vec![best + 1.0, best])],
        };
        let pool = vec![member("a", 0.5), member("b", 0.3), member("c", 0.9)];
        assert_eq!(oracle_best(&pool).unwrap(), 1);
        assert_eq!(oracle_best(&pool[..1]).unwrap(), 0);
        let mut dead = member("d", 0.1);
        dead.records[0].diverged = true;
        assert!(oracle_best(&[dead.clone()]).is_err());
        assert_eq!(oracle_best(&[dead, member("e", 2.0)]).unwrap(), 1);
    }

    #[test]
    fn oracle_agrees_with_brute_force() {
        let mut rng = crate::seed::rng(5);
        for _ in 0..50 {
            let pool: Vec<MemberRecords> = (0..rng.random_range(1..6))
                .map(|i| MemberRecords {
                    member: format!("m{i}"),
                    records: (0..3)
                        .map(|_| record(vec![1.0; 4], (0..4).map(|_| rng.random_range(0.0..1.0)).collect()))
                        .collect(),
                })
                .collect();
            let scores: Vec<f64> = pool
                .iter()
                .map(|m| {
                    m.records.iter().map(|r| r.validation.iter().cloned().fold(f64::MAX, f64::min)).sum::<f64>() / 3.0
                })
                .collect();
            let mut brute = 0;
            for i in 1..scores.len() {
                if scores[i] < scores[brute] {
                    brute = i;
                }
            }
            assert_eq!(oracle_best(&pool).unwrap(), brute);
        }
    }

    #[test]
    fn report_excludes_diverged_runs() {
        let mut records: Vec<EvaluationRecord> = (0..4)
            .map(|i| EvaluationRecord {
                replicate: i / 2,
                evaluation: i % 2,
                train: vec![1.0; 10],
                validation: (0..10).map(|t| if t % 2 == 0 { 1.0 } else { 1.2 }).collect(),
                diverged: false,
            })
            .collect();
        records[3].diverged = true;
        let r = optimization_stability_report(&records).unwrap();
        assert_eq!(r.n_diverged, 1);
        assert_eq!(r.per_evaluation.len(), 3);
        assert!(r.mean > 0.0);
        for rec in &mut records {
            rec.diverged = true;
        }
        assert!(optimization_stability_report(&records).is_err());
    }
}
