use thiserror::Error;

/// Errors raised by model construction, fitting and simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaRegError {
    #[error("unknown moderator index {index} (dataset has {available} moderators)")]
    UnknownModerator { index: usize, available: usize },

    #[error("unknown moderator name `{0}`")]
    UnknownModeratorName(String),

    #[error("design has zero columns")]
    EmptyDesign,

    #[error("study `{id}` has {found} moderators, expected {expected}")]
    RaggedModerators { id: String, expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular design: pivot {pivot:e} at column {column} below tolerance")]
    SingularDesign { column: usize, pivot: f64 },

    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,

    #[error("zero pooled variance")]
    ZeroPooledVariance,

    #[error("invalid group summary: {0}")]
    InvalidGroup(String),

    #[error("insufficient degrees of freedom: k = {k}, p = {p}")]
    InsufficientDf { k: usize, p: usize },

    #[error("non-positive variance {value} for study `{id}`")]
    NonPositiveVariance { id: String, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate leverage h = {leverage} for study {study}")]
    DegenerateLeverage { study: usize, leverage: f64 },

    #[error("mean leverage is zero")]
    ZeroMeanLeverage,

    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported number of studies k = {0} (need 6 or a multiple of 5)")]
    UnsupportedK(usize),
}

impl MetaRegError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            MetaRegError::SingularDesign { .. }
                | MetaRegError::NotSymmetric
                | MetaRegError::ZeroPooledVariance
                | MetaRegError::NonFinite(_)
                | MetaRegError::DegenerateLeverage { .. }
                | MetaRegError::ZeroMeanLeverage
        )
    }
}

pub type Result<T> = std::result::Result<T, MetaRegError>;
