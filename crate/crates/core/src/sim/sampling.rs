//! Data-generating process of the coverage simulation.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::rng::SimRng;
use crate::effect_size::{correction_factor, smd_variance};
use crate::error::{MetaRegError, Result};

/// Distribution of the standardized random effects `q_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReDist {
    Normal,
    Exponential,
    Laplace,
    Lognormal,
    T3,
}

impl ReDist {
    pub const ALL: [ReDist; 5] = [
        ReDist::Normal,
        ReDist::Exponential,
        ReDist::Laplace,
        ReDist::Lognormal,
        ReDist::T3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReDist::Normal => "normal",
            ReDist::Exponential => "exponential",
            ReDist::Laplace => "laplace",
            ReDist::Lognormal => "lognormal",
            ReDist::T3 => "t3",
        }
    }
}

impl fmt::Display for ReDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReDist {
    type Err = MetaRegError;

    fn from_str(s: &str) -> Result<Self> {
        ReDist::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| MetaRegError::InvalidParameter(format!("unknown random-effect distribution `{s}`")))
    }
}

/// Base group-size vectors, indexed by their mean.
fn base_sizes(nbar: u32) -> Option<[u32; 5]> {
    match nbar {
        15 => Some([6, 8, 9, 10, 42]),
        25 => Some([16, 18, 19, 20, 52]),
        50 => Some([41, 43, 44, 45, 77]),
        _ => None,
    }
}

/// Per-study group sizes (`n_E = n_C = n_i`).
///
/// `k = 6` appends one study of size `nbar` to the base vector; multiples of
/// five repeat the base vector `k / 5` times.
pub fn group_size_vector(k: usize, nbar: u32) -> Result<Vec<u32>> {
    let base = base_sizes(nbar)
        .ok_or_else(|| MetaRegError::InvalidParameter(format!("nbar = {nbar} not in {{15, 25, 50}}")))?;
    if k == 6 {
        let mut n = base.to_vec();
        n.push(nbar);
        Ok(n)
    } else if k > 0 && k.is_multiple_of(5) {
        Ok(base.iter().copied().cycle().take(k).collect())
    } else {
        Err(MetaRegError::UnsupportedK(k))
    }
}

/// k×2 matrix of bivariate standard normal moderators with correlation `rho`.
pub fn sample_moderators(rng: &mut SimRng, k: usize, rho: f64) -> DMatrix<f64> {
    let c = (1.0 - rho * rho).sqrt();
    let mut m = DMatrix::zeros(k, 2);
    for i in 0..k {
        let z1 = rng.normal();
        let z2 = rng.normal();
        m[(i, 0)] = z1;
        m[(i, 1)] = rho * z1 + c * z2;
    }
    m
}

/// `exp(1/2)`, the mean of a standard log-normal.
const LOGNORMAL_MEAN: f64 = 1.648_721_270_700_128_1;
/// `sqrt(e (e - 1))`, its standard deviation.
const LOGNORMAL_SD: f64 = 2.161_197_415_895_087_8;

/// Zero-mean, unit-variance draw from `dist`.
pub fn standardized_draw(rng: &mut SimRng, dist: ReDist) -> f64 {
    match dist {
        ReDist::Normal => rng.normal(),
        ReDist::Exponential => rng.exp1() - 1.0,
        ReDist::Laplace => {
            let a = rng.exp1();
            let b = rng.exp1();
            (a - b) / std::f64::consts::SQRT_2
        }
        ReDist::Lognormal => (rng.normal().exp() - LOGNORMAL_MEAN) / LOGNORMAL_SD,
        ReDist::T3 => rng.t3() / 3f64.sqrt(),
    }
}

/// Random effect `u = sqrt(tau2) * q`.
pub fn sample_random_effect(rng: &mut SimRng, dist: ReDist, tau2: f64) -> f64 {
    tau2.sqrt() * standardized_draw(rng, dist)
}

/// Simulated `(y, v)` for one balanced study with true SMD `theta` and
/// `n` subjects per arm.
pub fn generate_study(rng: &mut SimRng, theta: f64, n: u32) -> (f64, f64) {
    let nf = f64::from(n);
    let phi = theta + (2.0 / nf).sqrt() * rng.normal();
    let df = 2 * n - 2;
    let chi2 = loop {
        let x = rng.chi2_even(df);
        if x > 0.0 {
            break x;
        }
    };
    let g = phi / (chi2 / f64::from(df)).sqrt();
    let y = correction_factor(2 * n) * g;
    (y, smd_variance(y, n, n))
}
