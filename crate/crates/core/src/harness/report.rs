//! Run reports: named checks with thresholds, metric tables, and their JSON
//! and CSV renderings.

use std::fs;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const CHECKS_FILE: &str = "checks.csv";
pub const META_FILE: &str = "run_meta.json";

/// Floats that may be infinite, stored as strings in JSON when they are.
mod lossless {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v)
        } else {
            Repr::Text(v.to_string())
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "NaN" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("not a number: {t:?}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Passes when `value <= threshold`.
    AtMost,
    /// Passes when `value > threshold`.
    Above,
}

impl Comparison {
    fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparison::AtMost => value <= threshold,
            Comparison::Above => value > threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::AtMost => "<=",
            Comparison::Above => ">",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Hard checks decide the exit code; soft ones are informational.
    pub hard: bool,
    pub passed: bool,
    #[serde(with = "lossless")]
    pub value: f64,
    #[serde(with = "lossless")]
    pub threshold: f64,
    pub comparison: Comparison,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self::new(name, value, threshold, Comparison::AtMost)
    }

    pub fn above(name: &str, value: f64, threshold: f64) -> Self {
        Self::new(name, value, threshold, Comparison::Above)
    }

    /// A boolean condition recorded as a count of violations.
    pub fn holds(name: &str, violations: usize) -> Self {
        Self::at_most(name, violations as f64, 0.0)
    }

    fn new(name: &str, value: f64, threshold: f64, comparison: Comparison) -> Self {
        Self {
            name: name.to_owned(),
            hard: true,
            passed: comparison.holds(value, threshold),
            value,
            threshold,
            comparison,
            detail: String::new(),
        }
    }

    pub fn soft(mut self) -> Self {
        self.hard = false;
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}: {:?} {} {:?} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.comparison.symbol(),
            self.threshold,
            if self.hard { "" } else { "(informational)" }
        )
        .trim_end()
        .to_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(u64),
    #[serde(with = "lossless")]
    Num(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => format!("{v:?}"),
            Cell::Text(v) => v.clone(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_owned(),
            columns: columns.iter().map(|c| (*c).to_owned()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(&self.columns)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(Cell::render))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// `verify` or `experiment`.
    pub kind: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
}

impl RunReport {
    pub fn new(kind: &str, config: &ExperimentConfig) -> Self {
        Self {
            kind: kind.to_owned(),
            seed: config.seed,
            config: config.clone(),
            checks: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.hard && !c.passed).collect()
    }

    pub fn passed(&self) -> bool {
        self.failed().is_empty()
    }

    /// 0 when every hard check passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn checks_table(&self) -> Table {
        let mut t = Table::new(
            "checks",
            &[
                "name",
                "hard",
                "passed",
                "value",
                "comparison",
                "threshold",
                "detail",
            ],
        );
        for c in &self.checks {
            t.push(vec![
                c.name.as_str().into(),
                c.hard.to_string().into(),
                c.passed.to_string().into(),
                c.value.into(),
                c.comparison.symbol().into(),
                c.threshold.into(),
                c.detail.as_str().into(),
            ]);
        }
        t
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

/// Writes `report.json`, `checks.csv` and one CSV per table into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(REPORT_FILE, report.to_json())?;
    write(CHECKS_FILE, report.checks_table().to_csv()?)?;
    for table in &report.tables {
        write(&format!("{}.csv", table.name), table.to_csv()?)?;
    }
    Ok(())
}

/// Renders the report for standard output.
pub fn render(report: &RunReport, format: Format) -> Result<String> {
    match format {
        Format::Json => Ok(report.to_json()),
        Format::Csv => report.checks_table().to_csv(),
    }
}

/// Timing kept apart from the report so the report stays reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub started_unix_ms: u128,
    pub wall_clock_seconds: f64,
}

impl RunMeta {
    pub fn new(started: SystemTime, elapsed: Duration) -> Self {
        Self {
            started_unix_ms: started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            wall_clock_seconds: elapsed.as_secs_f64(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests::small;

    fn sample() -> RunReport {
        let mut r = RunReport::new("verify", &small());
        r.checks.push(Check::at_most("residual", 1e-13, 1e-12));
        r.checks
            .push(Check::at_most("loss", f64::INFINITY, 1.0).soft());
        let mut t = Table::new("metrics", &["rep", "loss", "note"]);
        t.push(vec![0usize.into(), 0.25.into(), "a,b".into()]);
        t.push(vec![1usize.into(), f64::INFINITY.into(), "".into()]);
        r.tables.push(t);
        r.tables.push(Table::new("empty", &["x", "y"]));
        r
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn exit_codes() {
        let mut r = sample();
        assert_eq!(r.exit_code(), 0);
        r.checks.push(Check::at_most("residual_2", 2e-12, 1e-12));
        assert_eq!(r.exit_code(), 1);
        assert_eq!(r.failed()[0].name, "residual_2");
    }

    #[test]
    fn csv_tables() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&sample(), dir.path()).unwrap();
        let empty = fs::read_to_string(dir.path().join("empty.csv")).unwrap();
        assert_eq!(empty, "x,y\n");
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics, "rep,loss,note\n0,0.25,\"a,b\"\n1,inf,\n");
        let back = RunReport::load(&dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(back, sample());
    }
}
