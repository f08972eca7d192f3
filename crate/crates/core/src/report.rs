//! CSV/JSON emitters for sweep results and score tables.
//!
//! Every float in a CSV file is written with 17 significant digits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ExperimentResult;

pub const SWEEP_HEADER: [&str; 8] = [
    "family",
    "r",
    "trials",
    "mse_emp",
    "mse_se",
    "mse_theory",
    "rstar_freq",
    "pass",
];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: String,
    pub r: usize,
    pub trials: u64,
    pub mse_emp: f64,
    pub mse_se: f64,
    pub mse_theory: f64,
    pub rstar_freq: f64,
    pub pass: bool,
}

impl SweepRow {
    pub fn from_result(result: &ExperimentResult) -> Vec<SweepRow> {
        result
            .rows
            .iter()
            .map(|row| SweepRow {
                family: result.family.as_str().to_string(),
                r: row.rank,
                trials: row.mse.count,
                mse_emp: row.mse.mean,
                mse_se: row.mse.std_error(),
                mse_theory: row.theory.mean,
                rstar_freq: row.selection_frequency(result.successful),
                pass: row.pass,
            })
            .collect()
    }

    fn record(&self) -> [String; 8] {
        [
            self.family.clone(),
            self.r.to_string(),
            self.trials.to_string(),
            fmt_f64(self.mse_emp),
            fmt_f64(self.mse_se),
            fmt_f64(self.mse_theory),
            fmt_f64(self.rstar_freq),
            self.pass.to_string(),
        ]
    }
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(csv_error)?;
    String::from_utf8(bytes).map_err(csv_error)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.record()).map_err(csv_error)?;
    }
    finish(w)
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_error)?;
    if header.iter().ne(SWEEP_HEADER) {
        return Err(Error::InvalidInput(format!("unexpected sweep header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// `j,score,sigma2` with `j` the 1-based ordered position.
pub fn scores_csv(scores: &[f64], sigma2: f64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["j", "score", "sigma2"]).map_err(csv_error)?;
    for (j, s) in scores.iter().enumerate() {
        w.write_record([(j + 1).to_string(), fmt_f64(*s), fmt_f64(sigma2)])
            .map_err(csv_error)?;
    }
    finish(w)
}

/// Generic table writer used by the acceptance report.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row).map_err(csv_error)?;
    }
    finish(w)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(format!("json: {e}")))
}
