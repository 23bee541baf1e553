//! Student-t quantiles and coefficient confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{MetaRegError, Result};
use crate::robust_cov::{CovarianceEstimate, CovarianceVariant};
use crate::wls::FitResult;

const QUANTILE_MAX_ITER: usize = 200;
const CF_MAX_ITER: usize = 20_000;

/// Continued fraction for the regularized incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// `I_x(a, b)` given both `x` and `1 - x` to avoid cancellation near 1.
fn beta_reg(a: f64, b: f64, x: f64, one_minus_x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if one_minus_x <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * one_minus_x.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, one_minus_x) / b
    }
}

/// `P(T > t)` for `t >= 0`.
fn t_upper_tail(t: f64, df: f64) -> f64 {
    let t2 = t * t;
    let denom = df + t2;
    0.5 * beta_reg(0.5 * df, 0.5, df / denom, t2 / denom)
}

fn t_pdf(t: f64, df: f64) -> f64 {
    let ln = ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (t * t / df).ln_1p();
    ln.exp()
}

/// Student-t CDF with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: u64) -> f64 {
    let df = df as f64;
    if t >= 0.0 {
        1.0 - t_upper_tail(t, df)
    } else {
        t_upper_tail(-t, df)
    }
}

/// Positive `t` with `P(T > t) = tail`, `0 < tail < 1/2`.
fn upper_quantile(tail: f64, df: f64) -> f64 {
    // bracket
    let mut lo = 0.0;
    let mut hi = 1.0;
    while t_upper_tail(hi, df) > tail {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..QUANTILE_MAX_ITER {
        let diff = t_upper_tail(t, df) - tail;
        if diff == 0.0 {
            return t;
        }
        if diff > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let newton = t + diff / t_pdf(t, df);
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - t).abs() <= 1e-15 * t.max(1.0) {
            return next;
        }
        t = next;
    }
    t
}

/// Quantile of the Student-t distribution, `P(T <= q) = p`.
///
/// Inverts the incomplete-beta form of the CDF by bracketed Newton iteration.
pub fn t_quantile(df: u64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MetaRegError::InvalidProbability(p));
    }
    if df < 1 {
        return Err(MetaRegError::InvalidParameter("t quantile needs df >= 1".into()));
    }
    let df = df as f64;
    Ok(if p == 0.5 {
        0.0
    } else if p > 0.5 {
        upper_quantile(1.0 - p, df)
    } else {
        -upper_quantile(p, df)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub coefficient_index: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub variant: CovarianceVariant,
    pub df: u64,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Two-sided critical value `t_{df, (1 + level) / 2}`.
pub fn critical_value(df: u64, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MetaRegError::InvalidProbability(level));
    }
    t_quantile(df, 1.0 - (1.0 - level) / 2.0)
}

/// Interval `estimate -/+ t * sqrt(variance)` for a precomputed critical value.
pub fn interval_with_critical(
    coefficient_index: usize,
    estimate: f64,
    variance: f64,
    critical: f64,
    level: f64,
    variant: CovarianceVariant,
    df: u64,
) -> ConfidenceInterval {
    let half = critical * variance.max(0.0).sqrt();
    ConfidenceInterval {
        coefficient_index,
        estimate,
        lower: estimate - half,
        upper: estimate + half,
        level,
        variant,
        df,
    }
}

pub fn confidence_intervals(fit: &FitResult, cov: &CovarianceEstimate, level: f64) -> Result<Vec<ConfidenceInterval>> {
    let df = fit.df();
    if df < 1 {
        return Err(MetaRegError::InsufficientDf { k: fit.k(), p: fit.p() });
    }
    let p = fit.p();
    if cov.sigma.nrows() != p || cov.sigma.ncols() != p {
        return Err(MetaRegError::DimensionMismatch(format!(
            "covariance is {}x{}, fit has {p} coefficients",
            cov.sigma.nrows(),
            cov.sigma.ncols()
        )));
    }
    let df = df as u64;
    let critical = critical_value(df, level)?;
    (0..p)
        .map(|j| {
            let var = cov.sigma[(j, j)];
            if !(var >= 0.0) {
                return Err(MetaRegError::NonFinite("covariance diagonal"));
            }
            Ok(interval_with_critical(
                j,
                fit.beta[j],
                var,
                critical,
                level,
                cov.variant,
                df,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    use crate::model::DesignMatrix;
    use crate::reml::Tau2Estimate;
    use crate::wls::fit_wls;

    #[test]
    fn cauchy_closed_form() {
        let q = t_quantile(1, 0.975).unwrap();
        let exact = (std::f64::consts::PI * 0.475).tan();
        assert!((q - exact).abs() < 1e-9, "{q} vs {exact}");
        assert!((q - 12.706_204_736_174_705).abs() < 1e-9);
    }

    #[test]
    fn df2_closed_form() {
        for p in [0.6f64, 0.9, 0.975, 0.995, 0.9999] {
            let a = 2.0 * p - 1.0;
            let exact: f64 = a * (2.0 / (1.0 - a * a)).sqrt();
            assert_relative_eq!(t_quantile(2, p).unwrap(), exact, max_relative = 1e-12);
        }
        assert!((t_quantile(2, 0.975).unwrap() - 4.302_652_729_749_464).abs() < 1e-12);
    }

    #[test]
    fn normal_limit() {
        let q = t_quantile(1_000_000, 0.975).unwrap();
        assert!((q - 1.959_963_984_540_054).abs() < 1e-4, "{q}");
    }

    #[test]
    fn cdf_inverts_quantile() {
        for df in [1, 2, 3, 5, 10, 47, 300] {
            for p in [0.01, 0.2, 0.5, 0.8, 0.975] {
                let q = t_quantile(df, p).unwrap();
                assert!((t_cdf(q, df) - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn invalid_probability() {
        assert!(t_quantile(3, 0.0).is_err());
        assert!(t_quantile(3, 1.0).is_err());
        assert!(t_quantile(0, 0.5).is_err());
        assert!(critical_value(3, 1.2).is_err());
    }

    #[test]
    fn interval_arithmetic() {
        let ci = interval_with_critical(0, 1.0, 0.25, 2.0, 0.95, CovarianceVariant::KH, 5);
        assert_eq!((ci.lower, ci.upper, ci.length()), (0.0, 2.0, 2.0));
        let ci = interval_with_critical(0, 1.5, 0.0, 2.0, 0.95, CovarianceVariant::KH, 5);
        assert_eq!((ci.lower, ci.upper), (1.5, 1.5));
    }

    #[test]
    fn k6_p4_uses_df2_multiplier() {
        let x = DMatrix::from_fn(6, 4, |i, j| if j == 0 { 1.0 } else { ((i * (j + 2)) % 7) as f64 - 3.0 });
        let d = DesignMatrix::from_matrix(x).unwrap();
        let y = DVector::from_column_slice(&[0.1, 0.5, -0.3, 0.8, 0.2, 0.0]);
        let fit = fit_wls(&d, &y, &DVector::from_element(6, 0.1), Tau2Estimate::fixed(0.0)).unwrap();
        let cov = crate::robust_cov::kh_covariance(&fit).unwrap();
        let cis = confidence_intervals(&fit, &cov, 0.95).unwrap();
        for ci in &cis {
            let half = 4.302_652_729_749_464 * cov.sigma[(ci.coefficient_index, ci.coefficient_index)].sqrt();
            assert_relative_eq!(ci.length(), 2.0 * half, max_relative = 1e-12);
            assert_eq!(ci.df, 2);
            assert!(ci.lower <= ci.estimate && ci.estimate <= ci.upper);
        }
    }

    proptest! {
        #[test]
        fn symmetric(df in 1u64..500, p in 0.001f64..0.999) {
            let a = t_quantile(df, p).unwrap();
            let b = t_quantile(df, 1.0 - p).unwrap();
            prop_assert!((a + b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn length_increases_with_level(df in 1u64..200, l in 0.5f64..0.98) {
            prop_assert!(critical_value(df, l + 0.01).unwrap() > critical_value(df, l).unwrap());
        }
    }
}
