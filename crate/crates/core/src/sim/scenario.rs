//! Scenario specifications and parameter grids.

use serde::{Deserialize, Serialize};

use super::sampling::{group_size_vector, ReDist};
use crate::error::{MetaRegError, Result};
use crate::model::{Column, ModelFormula};
use crate::reml::RemlConfig;
use crate::robust_cov::DEFAULT_ETA;

/// Moderator names used by the simulated design.
pub const SIM_MODERATORS: [&str; 2] = ["x1", "x2"];

/// One cell of the simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub k: usize,
    pub nbar: u32,
    pub tau2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta12: f64,
    pub rho: f64,
    pub re_dist: ReDist,
    /// Formula of the fitted model over the moderators `x1`, `x2`.
    pub fit: ModelFormula,
    pub level: f64,
    pub reps: usize,
    pub seed: u64,
    pub eta: f64,
    pub reml: RemlConfig,
}

impl ScenarioSpec {
    /// Correctly specified model without intercept.
    pub fn full_model() -> ModelFormula {
        ModelFormula {
            intercept: false,
            moderators: vec![0, 1],
            interactions: vec![(0, 1)],
        }
    }

    /// Scenario with the default fitted model, level 0.95 and default REML settings.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        k: usize,
        nbar: u32,
        tau2: f64,
        (beta1, beta2, beta12): (f64, f64, f64),
        rho: f64,
        re_dist: ReDist,
        reps: usize,
        seed: u64,
    ) -> Self {
        Self {
            k,
            nbar,
            tau2,
            beta1,
            beta2,
            beta12,
            rho,
            re_dist,
            fit: Self::full_model(),
            level: 0.95,
            reps,
            seed,
            eta: DEFAULT_ETA,
            reml: RemlConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        group_size_vector(self.k, self.nbar)?;
        let bad = |msg: String| Err(MetaRegError::InvalidParameter(msg));
        if !(self.tau2 >= 0.0 && self.tau2.is_finite()) {
            return bad(format!("tau2 = {} must be finite and >= 0", self.tau2));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("rho = {} must satisfy |rho| < 1", self.rho));
        }
        if ![self.beta1, self.beta2, self.beta12].iter().all(|b| b.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level = {} outside (0, 1)", self.level));
        }
        if self.reps < 1 {
            return bad("reps must be >= 1".into());
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta = {} outside (0, 1)", self.eta));
        }
        self.reml.validate()?;
        let p = self.fit.n_columns();
        if p == 0 {
            return Err(MetaRegError::EmptyDesign);
        }
        for c in self.fit.columns() {
            let ok = match c {
                Column::Intercept => true,
                Column::Moderator(j) => j < 2,
                Column::Interaction(a, b) => a < 2 && b < 2,
            };
            if !ok {
                return bad(format!("fitted column {c:?} references an unknown moderator"));
            }
        }
        if self.k < p + 1 {
            return Err(MetaRegError::InsufficientDf { k: self.k, p });
        }
        Ok(())
    }

    /// Generating value of each fitted coefficient.
    pub fn true_coefficients(&self) -> Vec<f64> {
        self.fit
            .columns()
            .into_iter()
            .map(|c| match c {
                Column::Intercept => 0.0,
                Column::Moderator(0) => self.beta1,
                Column::Moderator(1) => self.beta2,
                Column::Interaction(0, 1) | Column::Interaction(1, 0) => self.beta12,
                _ => 0.0,
            })
            .collect()
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        let names: Vec<String> = SIM_MODERATORS.iter().map(|s| s.to_string()).collect();
        self.fit
            .columns()
            .into_iter()
            .map(|c| match c {
                Column::Intercept => "intercept".to_string(),
                Column::Moderator(j) => names[j].clone(),
                Column::Interaction(a, b) => format!("{}:{}", names[a], names[b]),
            })
            .collect()
    }

    /// Stable 64-bit FNV-1a hash of every field that shapes the data or the
    /// fit. `reps` and `seed` are excluded so that streams of replication `r`
    /// stay identical when more replications are requested.
    pub fn scenario_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(&(self.k as u64).to_le_bytes());
        feed(&self.nbar.to_le_bytes());
        for x in [
            self.tau2,
            self.beta1,
            self.beta2,
            self.beta12,
            self.rho,
            self.level,
            self.eta,
        ] {
            feed(&x.to_bits().to_le_bytes());
        }
        feed(self.re_dist.name().as_bytes());
        feed(&[u8::from(self.fit.intercept)]);
        for c in self.fit.columns() {
            let (tag, a, b) = match c {
                Column::Intercept => (0u8, 0u64, 0u64),
                Column::Moderator(j) => (1, j as u64, 0),
                Column::Interaction(a, b) => (2, a as u64, b as u64),
            };
            feed(&[tag]);
            feed(&a.to_le_bytes());
            feed(&b.to_le_bytes());
        }
        feed(&(self.reml.max_iter as u64).to_le_bytes());
        feed(&self.reml.step.to_bits().to_le_bytes());
        feed(&self.reml.tol.to_bits().to_le_bytes());
        h
    }

    /// Self-describing identifier, free of commas.
    pub fn id(&self) -> String {
        format!(
            "k={};nbar={};tau2={};b1={};b2={};b12={};rho={};re={};fit={}",
            self.k,
            self.nbar,
            self.tau2,
            self.beta1,
            self.beta2,
            self.beta12,
            self.rho,
            self.re_dist,
            self.fit_label()
        )
    }

    fn fit_label(&self) -> String {
        let mut terms = self.coefficient_names();
        if terms.first().map(String::as_str) == Some("intercept") {
            terms[0] = "1".into();
        }
        terms.join("+")
    }
}

/// Parameter lists whose cartesian product forms the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub k: Vec<usize>,
    pub nbar: Vec<u32>,
    pub tau2: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta12: Vec<f64>,
    pub rho: Vec<f64>,
    pub re_dist: Vec<ReDist>,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub fit_intercept: bool,
    /// Fitted terms, e.g. `["x1", "x2", "x1:x2"]`; defaults to the generating model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_spec: Option<Vec<String>>,
}

fn default_level() -> f64 {
    0.95
}

impl GridConfig {
    /// The complete 77,760-cell grid at `reps` replications.
    pub fn full_grid(reps: usize, seed: u64) -> Self {
        Self {
            k: vec![6, 10, 20, 50],
            nbar: vec![15, 25, 50],
            tau2: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            beta1: vec![0.0, 0.2, 0.5],
            beta2: vec![0.0, 0.2, 0.5],
            beta12: vec![0.0, 0.2, 0.5, -0.5],
            rho: vec![0.0, 0.2, 0.5, -0.5],
            re_dist: ReDist::ALL.to_vec(),
            reps,
            seed,
            level: 0.95,
            fit_intercept: false,
            fit_spec: None,
        }
    }

    /// Resolve `fit_intercept` and `fit_spec` into a formula.
    pub fn formula(&self) -> Result<ModelFormula> {
        let mut f = match &self.fit_spec {
            None => ScenarioSpec::full_model(),
            Some(terms) => parse_terms(terms)?,
        };
        f.intercept = self.fit_intercept;
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.k.len()
            * self.nbar.len()
            * self.tau2.len()
            * self.beta1.len()
            * self.beta2.len()
            * self.beta12.len()
            * self.rho.len()
            * self.re_dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn parse_terms(terms: &[String]) -> Result<ModelFormula> {
    let lookup = |name: &str| {
        SIM_MODERATORS
            .iter()
            .position(|m| *m == name.trim())
            .ok_or_else(|| MetaRegError::UnknownModeratorName(name.trim().to_string()))
    };
    let mut f = ModelFormula::default();
    for t in terms {
        match t.split_once(':') {
            Some((a, b)) => f.interactions.push((lookup(a)?, lookup(b)?)),
            None => f.moderators.push(lookup(t)?),
        }
    }
    Ok(f)
}

/// Cartesian product in the order k, nbar, tau2, beta1, beta2, beta12, rho,
/// re_dist (last varies fastest). Every cell is validated.
pub fn scenario_grid(cfg: &GridConfig) -> Result<Vec<ScenarioSpec>> {
    let lists: [(&str, usize); 8] = [
        ("k", cfg.k.len()),
        ("nbar", cfg.nbar.len()),
        ("tau2", cfg.tau2.len()),
        ("beta1", cfg.beta1.len()),
        ("beta2", cfg.beta2.len()),
        ("beta12", cfg.beta12.len()),
        ("rho", cfg.rho.len()),
        ("re_dist", cfg.re_dist.len()),
    ];
    if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
        return Err(MetaRegError::InvalidParameter(format!(
            "parameter list `{name}` is empty"
        )));
    }
    let fit = cfg.formula()?;
    let mut out = Vec::with_capacity(cfg.len());
    for &k in &cfg.k {
        for &nbar in &cfg.nbar {
            for &tau2 in &cfg.tau2 {
                for &beta1 in &cfg.beta1 {
                    for &beta2 in &cfg.beta2 {
                        for &beta12 in &cfg.beta12 {
                            for &rho in &cfg.rho {
                                for &re_dist in &cfg.re_dist {
                                    let spec = ScenarioSpec {
                                        fit: fit.clone(),
                                        level: cfg.level,
                                        ..ScenarioSpec::new(
                                            k,
                                            nbar,
                                            tau2,
                                            (beta1, beta2, beta12),
                                            rho,
                                            re_dist,
                                            cfg.reps,
                                            cfg.seed,
                                        )
                                    };
                                    spec.validate()?;
                                    out.push(spec);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
