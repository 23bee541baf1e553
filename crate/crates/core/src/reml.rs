//! Restricted maximum likelihood estimation of the between-study variance.
//!
//! The estimate is found by damped Fisher scoring on `tau2`, projected onto
//! `[0, inf)` after every step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MetaRegError, Result};
use crate::model::DesignMatrix;
use crate::wls::WeightedSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemlConfig {
    pub max_iter: usize,
    /// Damping factor applied to each scoring step.
    pub step: f64,
    /// Convergence tolerance on `|delta tau2| / (1 + tau2)`.
    pub tol: f64,
}

impl Default for RemlConfig {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            step: 0.5,
            tol: 1e-8,
        }
    }
}

impl RemlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(MetaRegError::InvalidParameter("max_iter must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(MetaRegError::InvalidParameter(format!(
                "step {} outside (0, 1]",
                self.step
            )));
        }
        if !(self.tol > 0.0) {
            return Err(MetaRegError::InvalidParameter(format!("tol {} must be > 0", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau2Estimate {
    pub tau2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restricted_ll: f64,
}

impl Tau2Estimate {
    /// A user-supplied value (no estimation performed).
    pub fn fixed(tau2: f64) -> Self {
        Self {
            tau2,
            iterations: 0,
            converged: true,
            restricted_ll: f64::NAN,
        }
    }
}

fn restricted_ll_of(sys: &WeightedSystem) -> f64 {
    let ln_total: f64 = sys.weights.iter().map(|w| -w.ln()).sum();
    let rss: f64 = sys
        .residuals
        .iter()
        .zip(sys.weights.iter())
        .map(|(r, w)| w * r * r)
        .sum();
    -0.5 * (ln_total + sys.chol.ln_det() + rss)
}

/// Restricted log-likelihood at `tau2` with additive constants dropped.
pub fn restricted_loglik(tau2: f64, design: &DesignMatrix, y: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
    if !(tau2 >= 0.0) {
        return Err(MetaRegError::InvalidParameter(format!("tau2 = {tau2} must be >= 0")));
    }
    let sys = WeightedSystem::new(design.matrix(), y, v, tau2)?;
    let ll = restricted_ll_of(&sys);
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(MetaRegError::NonFinite("restricted log-likelihood"))
    }
}

/// Score and expected information of the restricted likelihood in `tau2`.
///
/// With `P = W - W X (X'WX)^-1 X' W`: score = (y'PPy - tr P) / 2 and
/// information = tr(PP) / 2.
fn score_and_information(x: &DMatrix<f64>, sys: &WeightedSystem) -> (f64, f64) {
    let k = x.nrows();
    let wx = {
        let mut m = x.clone();
        for (i, mut row) in m.row_iter_mut().enumerate() {
            row *= sys.weights[i];
        }
        m
    };
    // A = W X (X'WX)^-1 X' W, P = W - A
    let solved = sys.chol.solve(&wx.transpose());
    let mut p = -(&wx * solved);
    for i in 0..k {
        p[(i, i)] += sys.weights[i];
    }
    let py_sq: f64 = sys
        .residuals
        .iter()
        .zip(sys.weights.iter())
        .map(|(r, w)| (w * r).powi(2))
        .sum();
    let trace = p.trace();
    let trace_pp: f64 = p.iter().map(|e| e * e).sum();
    (0.5 * (py_sq - trace), 0.5 * trace_pp)
}

fn initial_tau2(y: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let k = y.len() as f64;
    let mean = y.mean();
    let var = y.iter().map(|yi| (yi - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (var - v.mean()).max(0.0)
}

pub fn reml_tau2(design: &DesignMatrix, y: &DVector<f64>, v: &DVector<f64>, cfg: &RemlConfig) -> Result<Tau2Estimate> {
    cfg.validate()?;
    let (k, p) = (design.k(), design.p());
    if k <= p {
        return Err(MetaRegError::InsufficientDf { k, p });
    }
    let x = design.matrix();
    let mut tau2 = initial_tau2(y, v);
    let mut consecutive_projections = 0;
    for iteration in 1..=cfg.max_iter {
        let sys = WeightedSystem::new(x, y, v, tau2)?;
        let (score, info) = score_and_information(x, &sys);
        if !score.is_finite() || !(info > 0.0) {
            return Err(MetaRegError::NonFinite("REML scoring step"));
        }
        let proposed = tau2 + cfg.step * score / info;
        let next = if proposed <= 0.0 {
            consecutive_projections += 1;
            0.0
        } else {
            consecutive_projections = 0;
            proposed
        };
        let delta = next - tau2;
        tau2 = next;
        if consecutive_projections >= 2 || delta.abs() <= cfg.tol * (1.0 + tau2) {
            return Ok(Tau2Estimate {
                tau2,
                iterations: iteration,
                converged: true,
                restricted_ll: restricted_loglik(tau2, design, y, v)?,
            });
        }
    }
    Ok(Tau2Estimate {
        tau2,
        iterations: cfg.max_iter,
        converged: false,
        restricted_ll: restricted_loglik(tau2, design, y, v)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intercept(k: usize) -> DesignMatrix {
        DesignMatrix::from_matrix(DMatrix::from_element(k, 1, 1.0)).unwrap()
    }

    /// Restricted log-likelihood through explicit inverses.
    fn dense_loglik(tau2: f64, x: &DMatrix<f64>, y: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let k = y.len();
        let vmat = DMatrix::from_fn(k, k, |i, j| if i == j { tau2 + v[i] } else { 0.0 });
        let w = vmat.clone().try_inverse().unwrap();
        let xtwx = x.transpose() * &w * x;
        let beta = xtwx.clone().try_inverse().unwrap() * x.transpose() * &w * y;
        let r = y - x * beta;
        -0.5 * (vmat.determinant().ln() + xtwx.determinant().ln() + (r.transpose() * &w * &r)[(0, 0)])
    }

    #[test]
    fn loglik_matches_dense_oracle() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, -1.1, 1.0, 0.8, 1.0, 2.0, 1.0, -0.4]);
        let y = DVector::from_column_slice(&[0.5, -0.2, 0.9, 1.7, 0.1]);
        let v = DVector::from_column_slice(&[0.1, 0.25, 0.07, 0.3, 0.12]);
        let d = DesignMatrix::from_matrix(x.clone()).unwrap();
        for tau2 in [0.0, 0.05, 0.4, 3.0] {
            let a = restricted_loglik(tau2, &d, &y, &v).unwrap();
            let b = dense_loglik(tau2, &x, &y, &v);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn loglik_diverges_for_huge_tau2() {
        let d = intercept(4);
        let y = DVector::from_column_slice(&[0.1, 0.5, -0.3, 0.2]);
        let v = DVector::from_element(4, 0.1);
        let a = restricted_loglik(1e3, &d, &y, &v).unwrap();
        let b = restricted_loglik(1e9, &d, &y, &v).unwrap();
        assert!(b < a && b < -20.0);
    }

    #[test]
    fn zero_dispersion_gives_zero() {
        let d = intercept(6);
        let y = DVector::from_element(6, 0.4);
        let v = DVector::from_element(6, 0.2);
        let est = reml_tau2(&d, &y, &v, &RemlConfig::default()).unwrap();
        assert_eq!(est.tau2, 0.0);
        assert!(est.converged);
        let at0 = restricted_loglik(0.0, &d, &y, &v).unwrap();
        assert!(at0 > restricted_loglik(0.01, &d, &y, &v).unwrap());
    }

    #[test]
    fn heterogeneous_data_positive() {
        let d = intercept(8);
        let y = DVector::from_column_slice(&[-1.0, 2.0, 0.5, 1.5, -0.8, 3.0, 0.0, 1.0]);
        let v = DVector::from_element(8, 0.1);
        let est = reml_tau2(&d, &y, &v, &RemlConfig::default()).unwrap();
        assert!(est.converged && est.tau2 > 1.0);
        // intercept-only with equal v: REML reduces to sample variance minus v
        let mean = y.mean();
        let s2 = y.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 7.0;
        assert!((est.tau2 - (s2 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let bad = RemlConfig {
            step: 0.0,
            ..RemlConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RemlConfig {
            max_iter: 0,
            ..RemlConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RemlConfig {
            tol: -1.0,
            ..RemlConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_convergence_is_reported() {
        let d = intercept(8);
        let y = DVector::from_column_slice(&[-1.0, 2.0, 0.5, 1.5, -0.8, 3.0, 0.0, 1.0]);
        let v = DVector::from_column_slice(&[0.1, 0.2, 0.3, 0.1, 0.5, 0.1, 0.2, 0.05]);
        let cfg = RemlConfig {
            max_iter: 2,
            ..RemlConfig::default()
        };
        let est = reml_tau2(&d, &y, &v, &cfg).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 2);
    }

    fn data() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (5usize..14).prop_flat_map(|k| {
            (
                proptest::collection::vec(-2.0f64..2.0, k),
                proptest::collection::vec(-2.0f64..2.0, k),
                proptest::collection::vec(0.02f64..0.8, k),
            )
        })
    }

    fn two_col(xs: &[f64]) -> DesignMatrix {
        DesignMatrix::from_matrix(DMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i] })).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn local_maximum((xs, ys, vs) in data()) {
            let d = two_col(&xs);
            let y = DVector::from_vec(ys);
            let v = DVector::from_vec(vs);
            let Ok(est) = reml_tau2(&d, &y, &v, &RemlConfig::default()) else { return Ok(()) };
            prop_assert!(est.tau2 >= 0.0);
            prop_assume!(est.converged);
            let ll = |t: f64| restricted_loglik(t, &d, &y, &v).unwrap();
            let eps = 1e-5;
            prop_assert!(ll(est.tau2) >= ll(est.tau2 + eps) - 1e-12);
            if est.tau2 > eps {
                prop_assert!(ll(est.tau2) >= ll(est.tau2 - eps) - 1e-12);
            }
        }

        #[test]
        fn shift_invariance((xs, ys, vs) in data(), c in -5.0f64..5.0) {
            let d = intercept(ys.len());
            let y = DVector::from_vec(ys);
            let v = DVector::from_vec(vs);
            let shifted = y.add_scalar(c);
            let a = reml_tau2(&d, &y, &v, &RemlConfig::default()).unwrap();
            let b = reml_tau2(&d, &shifted, &v, &RemlConfig::default()).unwrap();
            let _ = xs;
            prop_assert!((a.tau2 - b.tau2).abs() <= 1e-6 * (1.0 + a.tau2));
        }

        #[test]
        fn permutation_invariance((xs, ys, vs) in data(), shift in 1usize..13) {
            let k = ys.len();
            let perm: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
            let pick = |s: &[f64]| perm.iter().map(|&i| s[i]).collect::<Vec<_>>();
            let a = reml_tau2(&two_col(&xs), &DVector::from_vec(ys.clone()), &DVector::from_vec(vs.clone()), &RemlConfig::default());
            let b = reml_tau2(&two_col(&pick(&xs)), &DVector::from_vec(pick(&ys)), &DVector::from_vec(pick(&vs)), &RemlConfig::default());
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a.tau2 - b.tau2).abs() <= 1e-6 * (1.0 + a.tau2));
            }
        }

        #[test]
        fn zero_iff_boundary((xs, ys, vs) in data()) {
            let d = two_col(&xs);
            let y = DVector::from_vec(ys);
            let v = DVector::from_vec(vs);
            let Ok(est) = reml_tau2(&d, &y, &v, &RemlConfig::default()) else { return Ok(()) };
            let sys = WeightedSystem::new(d.matrix(), &y, &v, 0.0).unwrap();
            let (score0, _) = score_and_information(d.matrix(), &sys);
            if score0 > 1e-9 {
                prop_assert!(est.tau2 > 0.0);
            }
            if est.tau2 == 0.0 {
                prop_assert!(score0 <= 1e-9);
            }
        }
    }
}
