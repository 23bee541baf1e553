//! Mixed-effects meta-regression with robust confidence intervals.
//!
//! The pipeline is: build a [`DesignMatrix`] from a [`MetaDataset`], estimate
//! the between-study variance by REML, fit weighted least squares, compute one
//! of seven covariance estimators (HC0-HC5, Knapp-Hartung) and form t-based
//! intervals. The [`sim`] module wraps the same pipeline in a deterministic
//! Monte-Carlo engine that measures interval coverage and length.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod effect_size;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod reml;
pub mod robust_cov;
pub mod sim;
pub mod wls;

pub use effect_size::{hedges_smd, EffectEstimate, GroupSummary};
pub use error::{MetaRegError, Result};
pub use inference::{confidence_intervals, t_quantile, ConfidenceInterval};
pub use model::{
    build_design_matrix, validate_dataset, Column, DesignMatrix, MetaDataset, ModelFormula, StudyRecord,
    ValidationReport,
};
pub use reml::{reml_tau2, restricted_loglik, RemlConfig, Tau2Estimate};
pub use robust_cov::{
    covariance, hc_covariance, kh_covariance, leverage_exponents, CovarianceEstimate, CovarianceVariant,
};
pub use sim::{GridConfig, ReDist, ScenarioMetrics, ScenarioSpec};
pub use wls::{fit_meta_regression, fit_wls, hat_matrix, solve_spd, FitResult};
