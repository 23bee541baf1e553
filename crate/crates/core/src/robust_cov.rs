//! Covariance estimators for the WLS coefficients.
//!
//! The sandwich family `HC0`..`HC5` shares the form
//!
//! ```text
//! (X'WX)^-1 X'W E D D' E' W X (X'WX)^-1
//! ```
//!
//! with `E = diag(residuals)` and a variant-specific diagonal `D` built from the
//! leverages. `HC1` rescales `HC0` by `k / (k - p)`. Knapp-Hartung scales the
//! bread `(X'WX)^-1` by a weighted residual mean square.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MetaRegError, Result};
use crate::wls::FitResult;

/// Default HC5 tuning constant.
pub const DEFAULT_ETA: f64 = 0.7;

/// Truncation of the HC4 leverage exponent.
const EXPONENT_CAP: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CovarianceVariant {
    HC0,
    HC1,
    HC2,
    HC3,
    HC4,
    HC5,
    KH,
}

impl CovarianceVariant {
    pub const ALL: [CovarianceVariant; 7] = [
        CovarianceVariant::HC0,
        CovarianceVariant::HC1,
        CovarianceVariant::HC2,
        CovarianceVariant::HC3,
        CovarianceVariant::HC4,
        CovarianceVariant::HC5,
        CovarianceVariant::KH,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CovarianceVariant::HC0 => "HC0",
            CovarianceVariant::HC1 => "HC1",
            CovarianceVariant::HC2 => "HC2",
            CovarianceVariant::HC3 => "HC3",
            CovarianceVariant::HC4 => "HC4",
            CovarianceVariant::HC5 => "HC5",
            CovarianceVariant::KH => "KH",
        }
    }

    /// Whether the estimator divides by `1 - h_ii`.
    pub fn uses_leverage(self) -> bool {
        matches!(
            self,
            CovarianceVariant::HC2 | CovarianceVariant::HC3 | CovarianceVariant::HC4 | CovarianceVariant::HC5
        )
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CovarianceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CovarianceVariant {
    type Err = MetaRegError;

    fn from_str(s: &str) -> Result<Self> {
        CovarianceVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MetaRegError::InvalidParameter(format!("unknown covariance variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub variant: CovarianceVariant,
    pub sigma: DMatrix<f64>,
    /// Tuning constant, only for HC5.
    pub eta: Option<f64>,
}

impl CovarianceEstimate {
    /// Standard error of coefficient `j`.
    pub fn std_error(&self, j: usize) -> f64 {
        self.sigma[(j, j)].max(0.0).sqrt()
    }
}

/// Exponents for HC4 (`delta`) and HC5 (`alpha`).
///
/// `delta_i = min(4, h_i / h_bar)` and
/// `alpha_i = min(h_i / h_bar, max(4, eta * h_max / h_bar))`.
pub fn leverage_exponents(leverages: &[f64], eta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(MetaRegError::InvalidParameter(format!("eta = {eta} outside (0, 1)")));
    }
    if let Some((i, &h)) = leverages.iter().enumerate().find(|(_, h)| !(**h >= 0.0 && **h < 1.0)) {
        return Err(MetaRegError::DegenerateLeverage { study: i, leverage: h });
    }
    let k = leverages.len() as f64;
    let h_bar = leverages.iter().sum::<f64>() / k;
    if !(h_bar > 0.0) {
        return Err(MetaRegError::ZeroMeanLeverage);
    }
    let h_max = leverages.iter().copied().fold(0.0, f64::max);
    let alpha_cap = EXPONENT_CAP.max(eta * h_max / h_bar);
    let delta = leverages.iter().map(|h| (h / h_bar).min(EXPONENT_CAP)).collect();
    let alpha = leverages.iter().map(|h| (h / h_bar).min(alpha_cap)).collect();
    Ok((delta, alpha))
}

/// Sandwich with per-study meat weights `omega_i`:
/// `sum_i omega_i g_i g_i'` where `g_i = (X'WX)^-1 x_i`.
fn sandwich(fit: &FitResult, omega: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let x = fit.design.matrix();
    let p = x.ncols();
    let g = x * &fit.xtwx_inv;
    let mut sigma = DMatrix::<f64>::zeros(p, p);
    for i in 0..x.nrows() {
        let we = fit.weights[i] * fit.residuals[i];
        let s = we * we * omega(i);
        for a in 0..p {
            let ga = s * g[(i, a)];
            for b in 0..=a {
                sigma[(a, b)] += ga * g[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            sigma[(b, a)] = sigma[(a, b)];
        }
    }
    sigma
}

pub fn hc_covariance(fit: &FitResult, variant: CovarianceVariant, eta: f64) -> Result<CovarianceEstimate> {
    if variant.uses_leverage() {
        if let Some(&i) = fit.degenerate_leverage.first() {
            return Err(MetaRegError::DegenerateLeverage {
                study: i,
                leverage: fit.leverages[i],
            });
        }
    }
    let h = &fit.leverages;
    let sigma = match variant {
        CovarianceVariant::HC0 => sandwich(fit, |_| 1.0),
        CovarianceVariant::HC1 => {
            let (k, p) = (fit.k(), fit.p());
            if k <= p {
                return Err(MetaRegError::InsufficientDf { k, p });
            }
            sandwich(fit, |_| 1.0) * (k as f64 / (k - p) as f64)
        }
        CovarianceVariant::HC2 => sandwich(fit, |i| 1.0 / (1.0 - h[i])),
        CovarianceVariant::HC3 => sandwich(fit, |i| (1.0 - h[i]).powi(-2)),
        CovarianceVariant::HC4 | CovarianceVariant::HC5 => {
            let (delta, alpha) = leverage_exponents(h.as_slice(), eta)?;
            let exps = if variant == CovarianceVariant::HC4 {
                delta
            } else {
                alpha
            };
            sandwich(fit, |i| (1.0 - h[i]).powf(-exps[i]))
        }
        CovarianceVariant::KH => return kh_covariance(fit),
    };
    Ok(CovarianceEstimate {
        variant,
        sigma,
        eta: (variant == CovarianceVariant::HC5).then_some(eta),
    })
}

/// Knapp-Hartung: `s^2 (X'WX)^-1` with `s^2 = y'WPy / (k - p)`.
///
/// `WPy = W e`, so the quadratic form is evaluated as `e'We`.
pub fn kh_covariance(fit: &FitResult) -> Result<CovarianceEstimate> {
    let (k, p) = (fit.k(), fit.p());
    if k <= p {
        return Err(MetaRegError::InsufficientDf { k, p });
    }
    let quad: f64 = fit
        .residuals
        .iter()
        .zip(fit.weights.iter())
        .map(|(e, w)| w * e * e)
        .sum();
    let s2 = quad / (k - p) as f64;
    Ok(CovarianceEstimate {
        variant: CovarianceVariant::KH,
        sigma: &fit.xtwx_inv * s2,
        eta: None,
    })
}

/// Any of the seven estimators.
pub fn covariance(fit: &FitResult, variant: CovarianceVariant, eta: f64) -> Result<CovarianceEstimate> {
    match variant {
        CovarianceVariant::KH => kh_covariance(fit),
        _ => hc_covariance(fit, variant, eta),
    }
}
