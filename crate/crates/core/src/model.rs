//! Studies, datasets and design matrices.
//!
//! A [`MetaDataset`] holds the per-study effect estimates `y`, their sampling
//! variances `v` and the raw moderator values. A [`ModelFormula`] selects which
//! columns enter the fitted model; [`build_design_matrix`] turns the two into a
//! [`DesignMatrix`] whose column order is always intercept, then moderators,
//! then interactions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MetaRegError, Result};

/// One study's effect estimate, sampling variance and moderator values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub id: String,
    pub y: f64,
    pub v: f64,
    pub moderators: Vec<f64>,
}

/// A collection of studies sharing one moderator layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    studies: Vec<StudyRecord>,
    moderator_names: Vec<String>,
}

impl MetaDataset {
    pub fn new(studies: Vec<StudyRecord>, moderator_names: Vec<String>) -> Result<Self> {
        let expected = moderator_names.len();
        for s in &studies {
            if s.moderators.len() != expected {
                return Err(MetaRegError::RaggedModerators {
                    id: s.id.clone(),
                    expected,
                    found: s.moderators.len(),
                });
            }
        }
        Ok(Self {
            studies,
            moderator_names,
        })
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn moderator_names(&self) -> &[String] {
        &self.moderator_names
    }

    /// Number of studies.
    pub fn k(&self) -> usize {
        self.studies.len()
    }

    pub fn n_moderators(&self) -> usize {
        self.moderator_names.len()
    }

    pub fn effects(&self) -> DVector<f64> {
        DVector::from_iterator(self.k(), self.studies.iter().map(|s| s.y))
    }

    pub fn variances(&self) -> DVector<f64> {
        DVector::from_iterator(self.k(), self.studies.iter().map(|s| s.v))
    }

    /// k×m matrix of raw moderator values.
    pub fn moderator_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k(), self.n_moderators(), |i, j| self.studies[i].moderators[j])
    }

    pub fn moderator_index(&self, name: &str) -> Result<usize> {
        self.moderator_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MetaRegError::UnknownModeratorName(name.to_string()))
    }

    /// Copy with every moderator shifted to mean zero.
    pub fn centered(&self) -> Self {
        let k = self.k() as f64;
        let means: Vec<f64> = (0..self.n_moderators())
            .map(|j| self.studies.iter().map(|s| s.moderators[j]).sum::<f64>() / k)
            .collect();
        let studies = self
            .studies
            .iter()
            .map(|s| StudyRecord {
                moderators: s.moderators.iter().zip(&means).map(|(x, m)| x - m).collect(),
                ..s.clone()
            })
            .collect();
        Self {
            studies,
            moderator_names: self.moderator_names.clone(),
        }
    }
}

/// One column of a design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Column {
    Intercept,
    Moderator(usize),
    Interaction(usize, usize),
}

/// Which columns enter the fitted model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModelFormula {
    pub intercept: bool,
    pub moderators: Vec<usize>,
    pub interactions: Vec<(usize, usize)>,
}

impl ModelFormula {
    pub fn intercept_only() -> Self {
        Self {
            intercept: true,
            ..Self::default()
        }
    }

    /// Resolve moderator and interaction names against `names`.
    pub fn from_names<S: AsRef<str>>(
        names: &[String],
        intercept: bool,
        moderators: &[S],
        interactions: &[(S, S)],
    ) -> Result<Self> {
        let lookup = |name: &str| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| MetaRegError::UnknownModeratorName(name.to_string()))
        };
        let moderators = moderators
            .iter()
            .map(|m| lookup(m.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let interactions = interactions
            .iter()
            .map(|(a, b)| Ok((lookup(a.as_ref())?, lookup(b.as_ref())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            intercept,
            moderators,
            interactions,
        })
    }

    /// Columns in canonical order.
    pub fn columns(&self) -> Vec<Column> {
        let mut cols = Vec::with_capacity(self.n_columns());
        if self.intercept {
            cols.push(Column::Intercept);
        }
        cols.extend(self.moderators.iter().map(|&j| Column::Moderator(j)));
        cols.extend(self.interactions.iter().map(|&(a, b)| Column::Interaction(a, b)));
        cols
    }

    pub fn n_columns(&self) -> usize {
        usize::from(self.intercept) + self.moderators.len() + self.interactions.len()
    }
}

/// Design matrix `X` with a description of each column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    columns: Vec<Column>,
}

impl DesignMatrix {
    /// Build from a k×m matrix of raw moderator values.
    pub fn from_moderators(moderators: &DMatrix<f64>, formula: &ModelFormula) -> Result<Self> {
        let available = moderators.ncols();
        let columns = formula.columns();
        if columns.is_empty() {
            return Err(MetaRegError::EmptyDesign);
        }
        let check = |index: usize| {
            if index < available {
                Ok(())
            } else {
                Err(MetaRegError::UnknownModerator { index, available })
            }
        };
        for c in &columns {
            match *c {
                Column::Intercept => {}
                Column::Moderator(j) => check(j)?,
                Column::Interaction(a, b) => {
                    check(a)?;
                    check(b)?;
                }
            }
        }
        let k = moderators.nrows();
        let x = DMatrix::from_fn(k, columns.len(), |i, c| match columns[c] {
            Column::Intercept => 1.0,
            Column::Moderator(j) => moderators[(i, j)],
            Column::Interaction(a, b) => moderators[(i, a)] * moderators[(i, b)],
        });
        Ok(Self { x, columns })
    }

    /// Wrap an explicit matrix; columns are described as plain moderators.
    pub fn from_matrix(x: DMatrix<f64>) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(MetaRegError::EmptyDesign);
        }
        let columns = (0..x.ncols()).map(Column::Moderator).collect();
        Ok(Self { x, columns })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Number of studies (rows).
    pub fn k(&self) -> usize {
        self.x.nrows()
    }

    /// Number of fitted coefficients (columns).
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Residual degrees of freedom `k - p`, saturating at zero.
    pub fn df(&self) -> usize {
        self.k().saturating_sub(self.p())
    }

    /// Human-readable column labels, e.g. `intercept`, `x1`, `x1:x2`.
    pub fn column_names(&self, moderator_names: &[String]) -> Vec<String> {
        let name = |j: usize| moderator_names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
        self.columns
            .iter()
            .map(|c| match *c {
                Column::Intercept => "intercept".to_string(),
                Column::Moderator(j) => name(j),
                Column::Interaction(a, b) => format!("{}:{}", name(a), name(b)),
            })
            .collect()
    }
}

pub fn build_design_matrix(data: &MetaDataset, formula: &ModelFormula) -> Result<DesignMatrix> {
    DesignMatrix::from_moderators(&data.moderator_matrix(), formula)
}

/// Outcome of [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub k: usize,
    pub p: usize,
    pub df: i64,
    /// Study ids with `v <= 0`.
    pub nonpositive_variance: Vec<String>,
    /// Study ids with a non-finite `y`, `v` or moderator.
    pub non_finite: Vec<String>,
    pub insufficient_df: bool,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.nonpositive_variance.is_empty() && self.non_finite.is_empty() && !self.insufficient_df
    }
}

pub fn validate_dataset(data: &MetaDataset, design: &DesignMatrix) -> ValidationReport {
    let k = data.k();
    let p = design.p();
    let df = k as i64 - p as i64;
    let nonpositive_variance = data
        .studies()
        .iter()
        .filter(|s| s.v <= 0.0)
        .map(|s| s.id.clone())
        .collect();
    let non_finite = data
        .studies()
        .iter()
        .filter(|s| !s.y.is_finite() || !s.v.is_finite() || s.moderators.iter().any(|x| !x.is_finite()))
        .map(|s| s.id.clone())
        .collect();
    ValidationReport {
        k,
        p,
        df,
        nonpositive_variance,
        non_finite,
        insufficient_df: df < 1,
    }
}
