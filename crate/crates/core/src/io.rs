//! Dataset ingestion, scenario configuration and results serialization.
//!
//! Datasets are comma-separated with a header row. Either `y` and `v` are
//! given directly, or the six arm summaries
//! `mean_e,sd_e,n_e,mean_c,sd_c,n_c` from which `y` and `v` are computed.
//! An optional `id` (or `study`) column labels the studies; every other column
//! is a numeric moderator.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effect_size::{hedges_smd, GroupSummary};
use crate::error::MetaRegError;
use crate::inference::ConfidenceInterval;
use crate::model::{MetaDataset, StudyRecord};
use crate::sim::{scenario_grid, GridConfig, ScenarioMetrics};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required columns: {0}")]
    MissingColumns(String),
    #[error("row {row}, column `{column}`: non-numeric value `{value}`")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}, column `v`: variance {value} must be > 0")]
    NonPositiveVariance { row: usize, value: f64 },
    #[error("row {row}: {source}")]
    Study {
        row: usize,
        #[source]
        source: MetaRegError,
    },
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: unknown key `{0}`")]
    UnknownKey(String),
    #[error("{0}")]
    Domain(#[from] MetaRegError),
    #[error("results: {0}")]
    Format(String),
}

impl IoError {
    fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

const SUMMARY_COLUMNS: [&str; 6] = ["mean_e", "sd_e", "n_e", "mean_c", "sd_c", "n_c"];
const ID_COLUMNS: [&str; 2] = ["id", "study"];

fn parse_cell(row: usize, column: &str, raw: &str) -> Result<f64, IoError> {
    raw.trim().parse::<f64>().map_err(|_| IoError::NonNumeric {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

fn parse_count(row: usize, column: &str, raw: &str) -> Result<u32, IoError> {
    raw.trim().parse::<u32>().map_err(|_| IoError::NonNumeric {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Parse a dataset from any reader. Rows are numbered from 1 (first data row).
pub fn read_dataset<R: Read>(reader: R) -> Result<MetaDataset, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let direct = (find("y"), find("v"));
    let summary: Vec<Option<usize>> = SUMMARY_COLUMNS.iter().map(|c| find(c)).collect();
    let use_direct = matches!(direct, (Some(_), Some(_)));
    if !use_direct && summary.iter().any(Option::is_none) {
        let mut missing: Vec<&str> = Vec::new();
        if direct.0.is_none() {
            missing.push("y");
        }
        if direct.1.is_none() {
            missing.push("v");
        }
        let summary_missing: Vec<&str> = SUMMARY_COLUMNS
            .iter()
            .zip(&summary)
            .filter(|(_, i)| i.is_none())
            .map(|(c, _)| *c)
            .collect();
        return Err(IoError::MissingColumns(format!(
            "{} (or summary columns {})",
            missing.join(","),
            summary_missing.join(",")
        )));
    }
    let id_col = ID_COLUMNS.iter().find_map(|c| find(c));
    let reserved =
        |name: &str| name == "y" || name == "v" || SUMMARY_COLUMNS.contains(&name) || ID_COLUMNS.contains(&name);
    let moderator_cols: Vec<usize> = (0..headers.len()).filter(|&i| !reserved(&headers[i])).collect();
    let moderator_names = moderator_cols.iter().map(|&i| headers[i].clone()).collect();

    let mut studies = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let (y, v) = if use_direct {
            let (yi, vi) = (direct.0.unwrap(), direct.1.unwrap());
            (parse_cell(row, "y", cell(yi))?, parse_cell(row, "v", cell(vi))?)
        } else {
            let col = |j: usize| summary[j].unwrap();
            let group = |m: usize, s: usize, n: usize| -> Result<GroupSummary, IoError> {
                GroupSummary::new(
                    parse_cell(row, SUMMARY_COLUMNS[m], cell(col(m)))?,
                    parse_cell(row, SUMMARY_COLUMNS[s], cell(col(s)))?,
                    parse_count(row, SUMMARY_COLUMNS[n], cell(col(n)))?,
                )
                .map_err(|source| IoError::Study { row, source })
            };
            let est =
                hedges_smd(&group(0, 1, 2)?, &group(3, 4, 5)?).map_err(|source| IoError::Study { row, source })?;
            (est.y, est.v)
        };
        if !(v > 0.0) {
            return Err(IoError::NonPositiveVariance { row, value: v });
        }
        let moderators = moderator_cols
            .iter()
            .map(|&i| parse_cell(row, &headers[i], cell(i)))
            .collect::<Result<Vec<_>, _>>()?;
        let id = id_col.map_or_else(|| format!("study{row}"), |i| cell(i).to_string());
        studies.push(StudyRecord { id, y, v, moderators });
    }
    Ok(MetaDataset::new(studies, moderator_names)?)
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<MetaDataset, IoError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| IoError::file(path, e))?;
    read_dataset(file)
}

const CONFIG_KEYS: [&str; 13] = [
    "k",
    "nbar",
    "tau2",
    "beta1",
    "beta2",
    "beta12",
    "rho",
    "re_dist",
    "reps",
    "seed",
    "level",
    "fit_intercept",
    "fit_spec",
];

/// Parse and validate a scenario configuration document.
pub fn parse_scenario_config(text: &str) -> Result<GridConfig, IoError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if let Some(obj) = value.as_object() {
        if let Some(key) = obj.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(IoError::UnknownKey(key.clone()));
        }
    }
    let cfg: GridConfig = serde_json::from_value(value)?;
    scenario_grid(&cfg)?;
    Ok(cfg)
}

pub fn load_scenario_config(path: impl AsRef<Path>) -> Result<GridConfig, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_scenario_config(&text)
}

/// Format like C's `%.17g`: 17 significant digits, enough to round-trip.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, x);
        trim_zeros(&fixed)
    } else {
        let m = trim_zeros(mantissa);
        format!("{}e{}{:02}", m, if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// JSON numbers for finite values, strings for NaN and infinities.
mod json_f64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => s.parse().map_err(D::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub estimator: String,
    pub coefficient: String,
    #[serde(with = "json_f64")]
    pub estimate: f64,
    #[serde(with = "json_f64")]
    pub lower: f64,
    #[serde(with = "json_f64")]
    pub upper: f64,
    #[serde(with = "json_f64")]
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub scenario_id: String,
    pub estimator: String,
    pub coefficient: String,
    pub metric: String,
    #[serde(with = "json_f64")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "records", rename_all = "lowercase")]
pub enum ResultsTable {
    Fit(Vec<FitRow>),
    Simulation(Vec<SimRow>),
}

const FIT_HEADER: [&str; 6] = ["estimator", "coefficient", "estimate", "lower", "upper", "length"];
const SIM_HEADER: [&str; 5] = ["scenario_id", "estimator", "coefficient", "metric", "value"];

/// Metrics emitted per (scenario, estimator, coefficient).
pub const SIM_METRICS: [&str; 3] = ["coverage", "mean_length", "median_length"];

impl ResultsTable {
    pub fn len(&self) -> usize {
        match self {
            ResultsTable::Fit(r) => r.len(),
            ResultsTable::Simulation(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One row per (estimator, coefficient).
    pub fn from_intervals(coefficient_names: &[String], intervals: &[Vec<ConfidenceInterval>]) -> Self {
        let rows = intervals
            .iter()
            .flatten()
            .map(|ci| FitRow {
                estimator: ci.variant.name().to_string(),
                coefficient: coefficient_names[ci.coefficient_index].clone(),
                estimate: ci.estimate,
                lower: ci.lower,
                upper: ci.upper,
                length: ci.length(),
            })
            .collect();
        ResultsTable::Fit(rows)
    }

    /// One row per (scenario, estimator, coefficient, metric).
    pub fn from_metrics(metrics: &[ScenarioMetrics]) -> Self {
        let mut rows = Vec::new();
        for m in metrics {
            let id = m.scenario.id();
            for e in &m.estimators {
                for (name, c) in m.coefficient_names.iter().zip(&e.coefficients) {
                    for (metric, value) in SIM_METRICS.iter().zip([c.coverage, c.mean_length, c.median_length]) {
                        rows.push(SimRow {
                            scenario_id: id.clone(),
                            estimator: e.variant.name().to_string(),
                            coefficient: name.clone(),
                            metric: metric.to_string(),
                            value,
                        });
                    }
                }
            }
        }
        ResultsTable::Simulation(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    /// `.json` selects JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => OutputFormat::Json,
            _ => OutputFormat::Csv,
        }
    }
}

impl FromStr for OutputFormat {
    type Err = IoError;

    fn from_str(s: &str) -> Result<Self, IoError> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(IoError::Format(format!("unknown output format `{other}`"))),
        }
    }
}

pub fn render_results(table: &ResultsTable, format: OutputFormat) -> Result<String, IoError> {
    match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(table)?;
            s.push('\n');
            Ok(s)
        }
        OutputFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            match table {
                ResultsTable::Fit(rows) => {
                    w.write_record(FIT_HEADER)?;
                    for r in rows {
                        w.write_record([
                            r.estimator.clone(),
                            r.coefficient.clone(),
                            format_float(r.estimate),
                            format_float(r.lower),
                            format_float(r.upper),
                            format_float(r.length),
                        ])?;
                    }
                }
                ResultsTable::Simulation(rows) => {
                    w.write_record(SIM_HEADER)?;
                    for r in rows {
                        w.write_record([
                            r.scenario_id.clone(),
                            r.estimator.clone(),
                            r.coefficient.clone(),
                            r.metric.clone(),
                            format_float(r.value),
                        ])?;
                    }
                }
            }
            let bytes = w.into_inner().map_err(|e| IoError::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| IoError::Format(e.to_string()))
        }
    }
}

pub fn write_results(table: &ResultsTable, path: impl AsRef<Path>, format: OutputFormat) -> Result<(), IoError> {
    let path = path.as_ref();
    let text = render_results(table, format)?;
    fs::write(path, text).map_err(|e| IoError::file(path, e))
}

pub fn parse_results(text: &str, format: OutputFormat) -> Result<ResultsTable, IoError> {
    match format {
        OutputFormat::Json => Ok(serde_json::from_str(text)?),
        OutputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
            let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
            let num = |row: usize, col: &str, s: &str| parse_cell(row, col, s);
            if headers == FIT_HEADER {
                let mut rows = Vec::new();
                for (i, rec) in rdr.records().enumerate() {
                    let rec = rec?;
                    let row = i + 1;
                    rows.push(FitRow {
                        estimator: rec[0].to_string(),
                        coefficient: rec[1].to_string(),
                        estimate: num(row, "estimate", &rec[2])?,
                        lower: num(row, "lower", &rec[3])?,
                        upper: num(row, "upper", &rec[4])?,
                        length: num(row, "length", &rec[5])?,
                    });
                }
                Ok(ResultsTable::Fit(rows))
            } else if headers == SIM_HEADER {
                let mut rows = Vec::new();
                for (i, rec) in rdr.records().enumerate() {
                    let rec = rec?;
                    rows.push(SimRow {
                        scenario_id: rec[0].to_string(),
                        estimator: rec[1].to_string(),
                        coefficient: rec[2].to_string(),
                        metric: rec[3].to_string(),
                        value: num(i + 1, "value", &rec[4])?,
                    });
                }
                Ok(ResultsTable::Simulation(rows))
            } else {
                Err(IoError::Format(format!("unrecognized header {}", headers.join(","))))
            }
        }
    }
}

pub fn read_results(path: impl AsRef<Path>, format: OutputFormat) -> Result<ResultsTable, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_results(&text, format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn direct_columns() {
        let csv =
            "id,y,v,x1,x2\na,0.1,0.2,1,2\nb,0.3,0.1,2,1\nc,0.2,0.3,0,1\nd,0.5,0.2,1,1\ne,0.1,0.1,3,0\nf,0.0,0.4,2,2\n";
        let d = read_dataset(csv.as_bytes()).unwrap();
        assert_eq!(d.k(), 6);
        assert_eq!(d.moderator_names(), &["x1".to_string(), "x2".to_string()]);
        assert_eq!(d.studies()[1].id, "b");
        assert_eq!(d.studies()[4].moderators, vec![3.0, 0.0]);
    }

    #[test]
    fn summary_columns() {
        let csv = "mean_e,sd_e,n_e,mean_c,sd_c,n_c,dose\n1,1,10,0,1,10,2.5\n";
        let d = read_dataset(csv.as_bytes()).unwrap();
        let s = &d.studies()[0];
        assert!((s.y - 0.957_746_478_873_239_4).abs() < 1e-15);
        assert!((s.v - 0.222_931_957_944_852_2).abs() < 1e-15);
        assert_eq!(d.moderator_names(), &["dose".to_string()]);
        assert_eq!(s.id, "study1");
    }

    #[test]
    fn errors_name_row_and_column() {
        let e = read_dataset("y,v\n0.1,0.2\n0.3,0\n".as_bytes()).unwrap_err();
        assert!(matches!(e, IoError::NonPositiveVariance { row: 2, .. }), "{e}");
        let e = read_dataset("y,v,x\n0.1,0.2,abc\n".as_bytes()).unwrap_err();
        assert!(
            matches!(&e, IoError::NonNumeric { row: 1, column, .. } if column == "x"),
            "{e}"
        );
        let e = read_dataset("y,x\n0.1,0.2\n".as_bytes()).unwrap_err();
        assert!(matches!(e, IoError::MissingColumns(_)));
        let e = read_dataset("mean_e,sd_e,n_e,mean_c,sd_c,n_c\n1,0,10,0,0,10\n".as_bytes()).unwrap_err();
        assert!(matches!(
            e,
            IoError::Study {
                row: 1,
                source: MetaRegError::ZeroPooledVariance
            }
        ));
    }

    const MINIMAL: &str = r#"{"k":[6],"nbar":[25],"tau2":[0.5],"beta1":[0.2],"beta2":[0.2],
        "beta12":[0],"rho":[0.2],"re_dist":["normal"],"reps":10,"seed":1,"level":0.95,"fit_intercept":false}"#;

    #[test]
    fn config_parsing() {
        let cfg = parse_scenario_config(MINIMAL).unwrap();
        assert_eq!(scenario_grid(&cfg).unwrap().len(), 1);
        let bad = MINIMAL.replace("\"rho\":[0.2]", "\"rho\":[1.5]");
        assert!(matches!(parse_scenario_config(&bad), Err(IoError::Domain(_))));
        let typo = MINIMAL.replace("\"seed\"", "\"sead\"");
        assert!(matches!(parse_scenario_config(&typo), Err(IoError::UnknownKey(k)) if k == "sead"));
        assert!(matches!(parse_scenario_config("{"), Err(IoError::Json(_))));
    }

    #[test]
    fn full_grid_config() {
        let cfg = GridConfig::full_grid(10_000, 7);
        let text = serde_json::to_string(&cfg).unwrap();
        let back = parse_scenario_config(&text).unwrap();
        assert_eq!(scenario_grid(&back).unwrap().len(), 77_760);
    }

    #[test]
    fn float_format() {
        assert_eq!(format_float(0.95), "0.94999999999999996");
        assert_eq!(format_float(2.0), "2");
        assert_eq!(format_float(1e-7), "9.9999999999999995e-08");
        assert_eq!(format_float(1.5e20), "1.5e+20");
        assert_eq!(format_float(f64::NAN), "NaN");
    }

    #[test]
    fn empty_table_is_header_only() {
        let s = render_results(&ResultsTable::Fit(vec![]), OutputFormat::Csv).unwrap();
        assert_eq!(s, "estimator,coefficient,estimate,lower,upper,length\n");
        let s = render_results(&ResultsTable::Simulation(vec![]), OutputFormat::Csv).unwrap();
        assert_eq!(s, "scenario_id,estimator,coefficient,metric,value\n");
        assert_eq!(
            parse_results(&s, OutputFormat::Csv).unwrap(),
            ResultsTable::Simulation(vec![])
        );
    }

    fn fit_rows() -> impl Strategy<Value = Vec<FitRow>> {
        proptest::collection::vec(
            (
                "[A-Z0-9]{2,3}",
                "[a-z:0-9]{1,6}",
                any::<f64>(),
                any::<f64>(),
                any::<f64>(),
                any::<f64>(),
            ),
            0..6,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(estimator, coefficient, estimate, lower, upper, length)| FitRow {
                    estimator,
                    coefficient,
                    estimate,
                    lower,
                    upper,
                    length,
                })
                .collect()
        })
    }

    fn bits(t: &ResultsTable) -> Vec<u64> {
        match t {
            ResultsTable::Fit(r) => r
                .iter()
                .flat_map(|r| [r.estimate, r.lower, r.upper, r.length])
                .map(f64::to_bits)
                .collect(),
            ResultsTable::Simulation(r) => r.iter().map(|r| r.value.to_bits()).collect(),
        }
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(rows in fit_rows(), json in any::<bool>()) {
            let fmt = if json { OutputFormat::Json } else { OutputFormat::Csv };
            let t = ResultsTable::Fit(rows);
            let back = parse_results(&render_results(&t, fmt).unwrap(), fmt).unwrap();
            // NaN payloads are canonicalized
            let canon = |t: &ResultsTable| bits(t).into_iter().map(|b| if f64::from_bits(b).is_nan() { 0 } else { b }).collect::<Vec<_>>();
            prop_assert_eq!(canon(&t), canon(&back));
        }

        #[test]
        fn float_format_round_trips(x in any::<f64>()) {
            let back: f64 = format_float(x).parse().unwrap();
            prop_assert!(back.to_bits() == x.to_bits() || (x.is_nan() && back.is_nan()));
        }
    }
}
