//! Replication loop and aggregation of coverage and interval length.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::SimRng;
use super::sampling::{generate_study, group_size_vector, sample_moderators, sample_random_effect};
use super::scenario::ScenarioSpec;
use crate::error::{MetaRegError, Result};
use crate::inference::{critical_value, interval_with_critical, ConfidenceInterval};
use crate::model::DesignMatrix;
use crate::robust_cov::{covariance, CovarianceVariant};
use crate::wls::{fit_meta_regression, weighted_gram, Cholesky};

/// Moderator draws attempted before a replication is declared failed.
pub const MAX_DESIGN_ATTEMPTS: u32 = 100;

/// Result of one replication.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplicationRecord {
    Completed(CompletedReplication),
    /// No full-rank design (or no usable fit) could be produced.
    Failed {
        rank_regenerations: u32,
        reason: MetaRegError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedReplication {
    /// Moderator draws discarded for rank deficiency.
    pub rank_regenerations: u32,
    pub tau2: f64,
    pub reml_converged: bool,
    pub beta: Vec<f64>,
    /// Intervals indexed by [`CovarianceVariant::index`]; `None` when the
    /// estimator was undefined (degenerate leverage).
    pub intervals: Vec<Option<Vec<ConfidenceInterval>>>,
}

/// Design, effects, variances and the number of moderator redraws.
pub type SimulatedData = (DesignMatrix, DVector<f64>, DVector<f64>, u32);

/// Draw one dataset of the scenario (moderators resampled on rank deficiency).
/// On failure, returns the redraw count alongside the error.
pub fn simulate_dataset(
    spec: &ScenarioSpec,
    rng: &mut SimRng,
) -> std::result::Result<SimulatedData, (u32, MetaRegError)> {
    let sizes = group_size_vector(spec.k, spec.nbar).map_err(|e| (0, e))?;
    let mut regenerations = 0;
    let (mods, design) = loop {
        let mods = sample_moderators(rng, spec.k, spec.rho);
        let design = DesignMatrix::from_moderators(&mods, &spec.fit).map_err(|e| (regenerations, e))?;
        let ones = DVector::from_element(spec.k, 1.0);
        match Cholesky::new(&weighted_gram(design.matrix(), &ones)) {
            Ok(_) => break (mods, design),
            Err(e) => {
                regenerations += 1;
                if regenerations >= MAX_DESIGN_ATTEMPTS {
                    return Err((regenerations, e));
                }
            }
        }
    };
    let mut y = DVector::zeros(spec.k);
    let mut v = DVector::zeros(spec.k);
    for i in 0..spec.k {
        let (x1, x2) = (mods[(i, 0)], mods[(i, 1)]);
        let u = sample_random_effect(rng, spec.re_dist, spec.tau2);
        let theta = spec.beta1 * x1 + spec.beta2 * x2 + spec.beta12 * (x1 * x2) + u;
        let (yi, vi) = generate_study(rng, theta, sizes[i]);
        y[i] = yi;
        v[i] = vi;
    }
    Ok((design, y, v, regenerations))
}

/// Run replication `rep` of `spec`. `critical` is the two-sided t multiplier
/// for `df = k - p` at `spec.level`.
pub fn run_replication(spec: &ScenarioSpec, rep: u64, critical: f64) -> ReplicationRecord {
    let mut rng = SimRng::for_replication(spec.seed, spec.scenario_hash(), rep);
    let (design, y, v, rank_regenerations) = match simulate_dataset(spec, &mut rng) {
        Ok(d) => d,
        Err((rank_regenerations, reason)) => {
            return ReplicationRecord::Failed {
                rank_regenerations,
                reason,
            }
        }
    };
    let fit = match fit_meta_regression(&design, &y, &v, &spec.reml) {
        Ok(f) => f,
        Err(reason) => {
            return ReplicationRecord::Failed {
                rank_regenerations,
                reason,
            }
        }
    };
    let df = fit.df() as u64;
    let intervals = CovarianceVariant::ALL
        .iter()
        .map(|&variant| {
            let cov = covariance(&fit, variant, spec.eta).ok()?;
            Some(
                (0..fit.p())
                    .map(|j| {
                        interval_with_critical(j, fit.beta[j], cov.sigma[(j, j)], critical, spec.level, variant, df)
                    })
                    .collect(),
            )
        })
        .collect();
    ReplicationRecord::Completed(CompletedReplication {
        rank_regenerations,
        tau2: fit.tau2.tau2,
        reml_converged: fit.tau2.converged,
        beta: fit.beta.iter().copied().collect(),
        intervals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMetrics {
    pub coverage: f64,
    pub mean_length: f64,
    pub median_length: f64,
    /// `sqrt(coverage (1 - coverage) / N)`
    pub mc_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub variant: CovarianceVariant,
    /// Replications contributing to this estimator.
    pub replications: usize,
    pub coefficients: Vec<CoefficientMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rank_regenerations: u64,
    pub failed_replications: usize,
    pub reml_nonconverged: usize,
    /// Replications where HC2-HC5 were undefined.
    pub degenerate_leverage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: ScenarioSpec,
    pub coefficient_names: Vec<String>,
    pub true_values: Vec<f64>,
    /// One entry per variant, in [`CovarianceVariant::ALL`] order.
    pub estimators: Vec<EstimatorMetrics>,
    pub diagnostics: Diagnostics,
}

impl ScenarioMetrics {
    pub fn estimator(&self, variant: CovarianceVariant) -> &EstimatorMetrics {
        &self.estimators[variant.index()]
    }

    /// Diagnostic lines `<code> <detail>` for non-zero counters.
    pub fn warnings(&self) -> Vec<String> {
        let id = self.scenario.id();
        let d = &self.diagnostics;
        let mut out = Vec::new();
        if d.rank_regenerations > 0 {
            out.push(format!(
                "rank_regeneration scenario={id} count={}",
                d.rank_regenerations
            ));
        }
        if d.failed_replications > 0 {
            out.push(format!(
                "failed_replications scenario={id} count={}",
                d.failed_replications
            ));
        }
        if d.reml_nonconverged > 0 {
            out.push(format!(
                "reml_nonconvergence scenario={id} count={}",
                d.reml_nonconverged
            ));
        }
        if d.degenerate_leverage > 0 {
            out.push(format!(
                "degenerate_leverage scenario={id} count={}",
                d.degenerate_leverage
            ));
        }
        out
    }
}

/// Monte-Carlo standard error of an estimated coverage proportion.
pub fn mc_standard_error(coverage: f64, n: usize) -> f64 {
    (coverage * (1.0 - coverage) / n as f64).sqrt()
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Reduce per-replication records (in replication order) to scenario metrics.
pub fn aggregate(spec: &ScenarioSpec, records: &[ReplicationRecord]) -> ScenarioMetrics {
    let truth = spec.true_coefficients();
    let p = truth.len();
    let mut diagnostics = Diagnostics::default();
    let completed: Vec<&CompletedReplication> = records
        .iter()
        .filter_map(|r| match r {
            ReplicationRecord::Completed(c) => {
                diagnostics.rank_regenerations += u64::from(c.rank_regenerations);
                if !c.reml_converged {
                    diagnostics.reml_nonconverged += 1;
                }
                if c.intervals.iter().any(Option::is_none) {
                    diagnostics.degenerate_leverage += 1;
                }
                Some(c)
            }
            ReplicationRecord::Failed { rank_regenerations, .. } => {
                diagnostics.rank_regenerations += u64::from(*rank_regenerations);
                diagnostics.failed_replications += 1;
                None
            }
        })
        .collect();

    let estimators = CovarianceVariant::ALL
        .iter()
        .map(|&variant| {
            let used: Vec<&Vec<ConfidenceInterval>> = completed
                .iter()
                .filter_map(|c| c.intervals[variant.index()].as_ref())
                .collect();
            let n = used.len();
            let coefficients = (0..p)
                .map(|j| {
                    let mut lengths: Vec<f64> = used.iter().map(|cis| cis[j].length()).collect();
                    let covered = used.iter().filter(|cis| cis[j].contains(truth[j])).count();
                    let coverage = covered as f64 / n as f64;
                    let mean_length = lengths.iter().sum::<f64>() / n as f64;
                    CoefficientMetrics {
                        coverage,
                        mean_length,
                        median_length: median(&mut lengths),
                        mc_stderr: mc_standard_error(coverage, n),
                    }
                })
                .collect();
            EstimatorMetrics {
                variant,
                replications: n,
                coefficients,
            }
        })
        .collect();

    ScenarioMetrics {
        scenario: spec.clone(),
        coefficient_names: spec.coefficient_names(),
        true_values: truth,
        estimators,
        diagnostics,
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| MetaRegError::InvalidParameter(format!("cannot start worker pool: {e}")))
}

/// All replication records of a scenario, in replication order.
pub fn replicate(spec: &ScenarioSpec, workers: usize) -> Result<Vec<ReplicationRecord>> {
    spec.validate()?;
    let df = (spec.k - spec.fit.n_columns()) as u64;
    let critical = critical_value(df, spec.level)?;
    Ok(pool(workers)?.install(|| {
        (0..spec.reps as u64)
            .into_par_iter()
            .map(|rep| run_replication(spec, rep, critical))
            .collect()
    }))
}

/// Run one scenario on `workers` threads (0 = one per core). The result does
/// not depend on `workers`.
pub fn run_scenario(spec: &ScenarioSpec, workers: usize) -> Result<ScenarioMetrics> {
    let records = replicate(spec, workers)?;
    Ok(aggregate(spec, &records))
}

/// Run every scenario of a grid on a shared pool.
pub fn run_grid(specs: &[ScenarioSpec], workers: usize) -> Result<Vec<ScenarioMetrics>> {
    for s in specs {
        s.validate()?;
    }
    pool(workers)?.install(|| {
        specs
            .par_iter()
            .map(|spec| {
                let df = (spec.k - spec.fit.n_columns()) as u64;
                let critical = critical_value(df, spec.level)?;
                let records: Vec<ReplicationRecord> = (0..spec.reps as u64)
                    .into_par_iter()
                    .map(|rep| run_replication(spec, rep, critical))
                    .collect();
                Ok(aggregate(spec, &records))
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::sampling::ReDist;

    fn spec(reps: usize) -> ScenarioSpec {
        ScenarioSpec::new(6, 25, 0.5, (0.2, 0.2, 0.0), 0.2, ReDist::Normal, reps, 2024)
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn mc_error_at_nominal() {
        assert!((mc_standard_error(0.95, 10_000) - 0.002_179_449_471_770_337).abs() < 1e-15);
    }

    #[test]
    fn replication_is_reproducible() {
        let s = spec(1);
        let c = critical_value(3, 0.95).unwrap();
        assert_eq!(run_replication(&s, 5, c), run_replication(&s, 5, c));
        assert_ne!(run_replication(&s, 5, c), run_replication(&s, 6, c));
    }

    #[test]
    fn hc1_over_hc0_length_ratio() {
        let s = spec(50);
        let c = critical_value(3, 0.95).unwrap();
        let ratio = (6.0f64 / 3.0).sqrt();
        for rep in 0..50 {
            if let ReplicationRecord::Completed(r) = run_replication(&s, rep, c) {
                let hc0 = r.intervals[0].as_ref().unwrap();
                let hc1 = r.intervals[1].as_ref().unwrap();
                for (a, b) in hc0.iter().zip(hc1) {
                    assert!((b.length() / a.length() - ratio).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kh_coverage_matches_t_test() {
        // beta12 = 0 is a true-zero coefficient; redo each fit and test H0 directly
        let s = spec(100);
        let records = replicate(&s, 2).unwrap();
        let crit = critical_value(3, 0.95).unwrap();
        let mut accepted = 0;
        let mut n = 0;
        for rep in 0..100u64 {
            let mut rng = SimRng::for_replication(s.seed, s.scenario_hash(), rep);
            let Ok((design, y, v, _)) = simulate_dataset(&s, &mut rng) else {
                continue;
            };
            let fit = fit_meta_regression(&design, &y, &v, &s.reml).unwrap();
            let se = crate::robust_cov::kh_covariance(&fit).unwrap().std_error(2);
            n += 1;
            if fit.beta[2].abs() <= crit * se {
                accepted += 1;
            }
        }
        let m = aggregate(&s, &records);
        let kh = m.estimator(CovarianceVariant::KH);
        assert_eq!(kh.replications, n);
        assert_eq!(kh.coefficients[2].coverage, accepted as f64 / n as f64);
    }

    #[test]
    fn counts_are_consistent() {
        let m = run_scenario(&spec(200), 3).unwrap();
        let d = m.diagnostics;
        for e in &m.estimators {
            let expected = if e.variant.uses_leverage() {
                200 - d.failed_replications - d.degenerate_leverage
            } else {
                200 - d.failed_replications
            };
            assert_eq!(e.replications, expected);
            for c in &e.coefficients {
                assert!((0.0..=1.0).contains(&c.coverage));
                assert!(c.mean_length >= 0.0 && c.median_length >= 0.0);
            }
        }
    }

    #[test]
    fn worker_count_does_not_matter() {
        let s = spec(64);
        let a = run_scenario(&s, 1).unwrap();
        let b = run_scenario(&s, 5).unwrap();
        assert_eq!(a, b);
    }
}
