//! Standardized mean difference (Hedges' g with small-sample correction).

use serde::{Deserialize, Serialize};

use crate::error::{MetaRegError, Result};

/// Summary statistics of one study arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean: f64,
    pub sd: f64,
    pub n: u32,
}

impl GroupSummary {
    pub fn new(mean: f64, sd: f64, n: u32) -> Result<Self> {
        if !mean.is_finite() || !sd.is_finite() {
            return Err(MetaRegError::NonFinite("group summary"));
        }
        if sd < 0.0 {
            return Err(MetaRegError::InvalidGroup(format!("negative sd {sd}")));
        }
        if n < 2 {
            return Err(MetaRegError::InvalidGroup(format!("group size {n} < 2")));
        }
        Ok(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    /// Bias-corrected SMD.
    pub y: f64,
    /// Approximate sampling variance of `y`.
    pub v: f64,
    /// Uncorrected Hedges' g.
    pub g: f64,
    /// Correction factor `J` with `y = J * g`.
    pub correction: f64,
}

/// Small-sample correction `1 - 3 / (4N - 9)` for total sample size `N`.
pub fn correction_factor(total_n: u32) -> f64 {
    1.0 - 3.0 / (4.0 * f64::from(total_n) - 9.0)
}

/// Approximate sampling variance of a corrected SMD.
pub fn smd_variance(y: f64, n_exp: u32, n_ctl: u32) -> f64 {
    let (ne, nc) = (f64::from(n_exp), f64::from(n_ctl));
    1.0 / ne + 1.0 / nc + y * y / (2.0 * (ne + nc))
}

pub fn hedges_smd(exp: &GroupSummary, ctl: &GroupSummary) -> Result<EffectEstimate> {
    if exp.n < 2 || ctl.n < 2 {
        return Err(MetaRegError::InvalidGroup("group size < 2".into()));
    }
    let (ne, nc) = (f64::from(exp.n), f64::from(ctl.n));
    let pooled_var = ((ne - 1.0) * exp.sd * exp.sd + (nc - 1.0) * ctl.sd * ctl.sd) / (ne + nc - 2.0);
    if !(pooled_var > 0.0) {
        return Err(MetaRegError::ZeroPooledVariance);
    }
    let g = (exp.mean - ctl.mean) / pooled_var.sqrt();
    let correction = correction_factor(exp.n + ctl.n);
    let y = correction * g;
    let v = smd_variance(y, exp.n, ctl.n);
    Ok(EffectEstimate { y, v, g, correction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grp(mean: f64, sd: f64, n: u32) -> GroupSummary {
        GroupSummary::new(mean, sd, n).unwrap()
    }

    #[test]
    fn equal_means() {
        let e = hedges_smd(&grp(3.0, 1.2, 10), &grp(3.0, 0.7, 10)).unwrap();
        assert_eq!(e.y, 0.0);
        assert_relative_eq!(e.v, 0.2, max_relative = 1e-15);
    }

    #[test]
    fn unit_difference() {
        // 40-digit evaluation
        let e = hedges_smd(&grp(1.0, 1.0, 10), &grp(0.0, 1.0, 10)).unwrap();
        assert_eq!(e.g, 1.0);
        assert_relative_eq!(e.correction, 0.957_746_478_873_239_4, max_relative = 1e-15);
        assert_relative_eq!(e.y, 0.957_746_478_873_239_4, max_relative = 1e-15);
        assert_relative_eq!(e.v, 0.222_931_957_944_852_2, max_relative = 1e-14);
    }

    #[test]
    fn zero_pooled_variance() {
        assert_eq!(
            hedges_smd(&grp(1.0, 0.0, 5), &grp(0.0, 0.0, 5)),
            Err(MetaRegError::ZeroPooledVariance)
        );
        assert!(GroupSummary::new(0.0, 1.0, 1).is_err());
        assert!(GroupSummary::new(0.0, -1.0, 4).is_err());
    }

    #[test]
    fn correction_at_balanced_15() {
        assert_relative_eq!(correction_factor(30), 0.972_972_972_972_973, max_relative = 1e-15);
    }

    proptest! {
        #[test]
        fn swap_negates(me in -5.0f64..5.0, mc in -5.0f64..5.0, se in 0.1f64..3.0, sc in 0.1f64..3.0,
                        ne in 2u32..200, nc in 2u32..200) {
            let a = hedges_smd(&grp(me, se, ne), &grp(mc, sc, nc)).unwrap();
            let b = hedges_smd(&grp(mc, sc, nc), &grp(me, se, ne)).unwrap();
            prop_assert_eq!(a.y, -b.y);
            prop_assert_eq!(a.v, b.v);
            prop_assert!(a.y.abs() <= a.g.abs());
            prop_assert!(a.v > 0.0);
        }

        #[test]
        fn correction_in_unit_interval_and_increasing(n in 4u32..100_000) {
            let j = correction_factor(n);
            prop_assert!(j > 0.0 && j < 1.0);
            prop_assert!(correction_factor(n + 1) > j);
        }

        #[test]
        fn variance_decreases_with_n(y in -3.0f64..3.0, n in 2u32..10_000) {
            prop_assert!(smd_variance(y, n + 1, n + 1) < smd_variance(y, n, n));
        }
    }
}
