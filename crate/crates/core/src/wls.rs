//! Weighted least squares with inverse-variance weights `1 / (tau2 + v_i)`.
//!
//! [`fit_wls`] produces a [`FitResult`] holding everything the covariance
//! estimators need: coefficients, the bread `(X'WX)^-1`, weights, residuals
//! and leverages.

use nalgebra::{DMatrix, DVector};

use crate::error::{MetaRegError, Result};
use crate::model::DesignMatrix;
use crate::reml::{reml_tau2, RemlConfig, Tau2Estimate};

/// Relative pivot tolerance of the Cholesky factorization.
pub const PIVOT_TOL: f64 = 1e-12;

/// Leverages above `1 - DEGENERATE_LEVERAGE_TOL` are flagged.
pub const DEGENERATE_LEVERAGE_TOL: f64 = 1e-12;

/// Lower-triangular Cholesky factor `A = L L'`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factor a symmetric positive-definite matrix.
    ///
    /// Fails with [`MetaRegError::SingularDesign`] when a pivot drops below
    /// `PIVOT_TOL` times the largest diagonal entry of `a`.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(MetaRegError::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(MetaRegError::NonFinite("matrix to factor"));
        }
        let scale = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        for i in 0..n {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                    return Err(MetaRegError::NotSymmetric);
                }
            }
        }
        let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)]));
        let tol = PIVOT_TOL * max_diag;
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for c in 0..j {
                d -= l[(j, c)] * l[(j, c)];
            }
            if !(d > tol) {
                return Err(MetaRegError::SingularDesign { column: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for c in 0..j {
                    s -= l[(i, c)] * l[(j, c)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solve `A X = B` in place by forward and back substitution.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        for col in 0..x.ncols() {
            for i in 0..n {
                let mut s = x[(i, col)];
                for c in 0..i {
                    s -= self.l[(i, c)] * x[(c, col)];
                }
                x[(i, col)] = s / self.l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = x[(i, col)];
                for c in (i + 1)..n {
                    s -= self.l[(c, i)] * x[(c, col)];
                }
                x[(i, col)] = s / self.l[(i, i)];
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        DVector::from_column_slice(m.as_slice())
    }

    /// `A^-1`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let inv = self.solve(&DMatrix::identity(n, n));
        (&inv + inv.transpose()) * 0.5
    }

    /// `ln det A`.
    pub fn ln_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Solve `A X = B` for symmetric positive-definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != a.nrows() {
        return Err(MetaRegError::DimensionMismatch(format!(
            "rhs has {} rows, matrix is {}x{}",
            b.nrows(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(Cholesky::new(a)?.solve(b))
}

/// `X' diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    let mut g = DMatrix::<f64>::zeros(p, p);
    for i in 0..x.nrows() {
        for a in 0..p {
            let wa = w[i] * x[(i, a)];
            for b in 0..=a {
                g[(a, b)] += wa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g[(b, a)] = g[(a, b)];
        }
    }
    g
}

/// Inverse total variances `1 / (tau2 + v_i)`.
pub(crate) fn inverse_variance_weights(tau2: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    let mut w = DVector::zeros(v.len());
    for (i, vi) in v.iter().enumerate() {
        let total = tau2 + vi;
        if !(total > 0.0) || !total.is_finite() {
            return Err(MetaRegError::NonPositiveVariance {
                id: format!("#{i}"),
                value: total,
            });
        }
        w[i] = 1.0 / total;
    }
    Ok(w)
}

/// Weighted system at a fixed `tau2`: factor of `X'WX`, coefficients and residuals.
pub(crate) struct WeightedSystem {
    pub weights: DVector<f64>,
    pub chol: Cholesky,
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
}

impl WeightedSystem {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, v: &DVector<f64>, tau2: f64) -> Result<Self> {
        let weights = inverse_variance_weights(tau2, v)?;
        let chol = Cholesky::new(&weighted_gram(x, &weights))?;
        let xtwy = x.transpose() * y.component_mul(&weights);
        let beta = chol.solve_vec(&xtwy);
        let residuals = y - x * &beta;
        Ok(Self {
            weights,
            chol,
            beta,
            residuals,
        })
    }
}

/// A weighted least squares fit and its diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// `(X'WX)^-1`
    pub xtwx_inv: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub residuals: DVector<f64>,
    /// Diagonal of the hat matrix `X (X'WX)^-1 X' W`.
    pub leverages: DVector<f64>,
    pub tau2: Tau2Estimate,
    /// Study indices whose leverage is numerically one.
    pub degenerate_leverage: Vec<usize>,
    pub design: DesignMatrix,
    pub y: DVector<f64>,
    pub v: DVector<f64>,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.design.k()
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }

    /// Residual degrees of freedom `k - p`.
    pub fn df(&self) -> usize {
        self.design.df()
    }

    pub fn fitted(&self) -> DVector<f64> {
        self.design.matrix() * &self.beta
    }
}

fn check_inputs(design: &DesignMatrix, y: &DVector<f64>, v: &DVector<f64>) -> Result<()> {
    let k = design.k();
    if y.len() != k || v.len() != k {
        return Err(MetaRegError::DimensionMismatch(format!(
            "design has {k} rows, y has {}, v has {}",
            y.len(),
            v.len()
        )));
    }
    if k <= design.p() {
        return Err(MetaRegError::InsufficientDf { k, p: design.p() });
    }
    if y.iter()
        .chain(v.iter())
        .chain(design.matrix().iter())
        .any(|x| !x.is_finite())
    {
        return Err(MetaRegError::NonFinite("fit inputs"));
    }
    Ok(())
}

pub fn fit_wls(design: &DesignMatrix, y: &DVector<f64>, v: &DVector<f64>, tau2: Tau2Estimate) -> Result<FitResult> {
    check_inputs(design, y, v)?;
    let x = design.matrix();
    let sys = WeightedSystem::new(x, y, v, tau2.tau2)?;
    let xtwx_inv = sys.chol.inverse();
    let leverages = DVector::from_iterator(
        x.nrows(),
        (0..x.nrows()).map(|i| {
            let row = x.row(i);
            sys.weights[i] * (row * &xtwx_inv * row.transpose())[(0, 0)]
        }),
    );
    let degenerate_leverage = leverages
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > 1.0 - DEGENERATE_LEVERAGE_TOL)
        .map(|(i, _)| i)
        .collect();
    Ok(FitResult {
        beta: sys.beta,
        xtwx_inv,
        weights: sys.weights,
        residuals: sys.residuals,
        leverages,
        tau2,
        degenerate_leverage,
        design: design.clone(),
        y: y.clone(),
        v: v.clone(),
    })
}

/// Estimate `tau2` by REML, then fit.
pub fn fit_meta_regression(
    design: &DesignMatrix,
    y: &DVector<f64>,
    v: &DVector<f64>,
    cfg: &RemlConfig,
) -> Result<FitResult> {
    check_inputs(design, y, v)?;
    let tau2 = reml_tau2(design, y, v, cfg)?;
    fit_wls(design, y, v, tau2)
}

/// Full k×k hat matrix `H = X (X'WX)^-1 X' W`.
pub fn hat_matrix(fit: &FitResult) -> DMatrix<f64> {
    let x = fit.design.matrix();
    let mut h = x * &fit.xtwx_inv * x.transpose();
    for (j, mut col) in h.column_iter_mut().enumerate() {
        col *= fit.weights[j];
    }
    h
}
