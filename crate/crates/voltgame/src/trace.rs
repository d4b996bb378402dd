//! Trace persistence: a CSV table with one row per outer iteration and a
//! JSON summary of the run.
//!
//! Floats are written in Rust's shortest round-trip form, so a value read
//! back from the table is bit-identical to the one that was written.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voltgame_core::{GameConditioning, OracleReport, ScenarioTrace};

use crate::error::TraceError;
use crate::verify::OracleDigest;

pub const TABLE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Header of the trace table for `n` DSOs.
pub fn table_header(n: usize) -> Vec<String> {
    let mut header = vec![String::from("k")];
    for prefix in ["v_ref", "v", "xi", "payment"] {
        header.extend((1..=n).map(|i| format!("{prefix}{i}")));
    }
    header.extend(["phi_e", "grad_norm", "inner_iters"].map(String::from));
    header
}

/// One parsed row of the trace table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub k: usize,
    pub v_ref: Vec<f64>,
    pub v: Vec<f64>,
    pub xi: Vec<f64>,
    pub payments: Vec<f64>,
    pub phi_e: f64,
    pub grad_norm: f64,
    pub inner_iters: usize,
}

pub fn write_table(trace: &ScenarioTrace, path: &Path) -> Result<(), TraceError> {
    let csv_err = |source| TraceError::Csv { path: path.to_path_buf(), source };
    let n = trace.dso_buses.len();
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer.write_record(table_header(n)).map_err(csv_err)?;
    for row in &trace.rows {
        let mut record = Vec::with_capacity(4 * n + 4);
        record.push(row.k.to_string());
        for values in [&row.v_ref, &row.v, &row.xi, &row.payments] {
            record.extend(values.iter().map(|x| x.to_string()));
        }
        record.push(row.phi_e.to_string());
        record.push(row.grad_norm.to_string());
        record.push(row.inner_iters.to_string());
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| TraceError::Io { path: path.to_path_buf(), source })
}

pub fn read_table(path: &Path) -> Result<Vec<TableRow>, TraceError> {
    let malformed = |message: String| TraceError::Malformed { path: path.to_path_buf(), message };
    let mut reader =
        csv::Reader::from_path(path).map_err(|source| TraceError::Csv { path: path.to_path_buf(), source })?;
    let width = reader.headers().map_err(|source| TraceError::Csv { path: path.to_path_buf(), source })?.len();
    if width < 4 || (width - 4) % 4 != 0 {
        return Err(malformed(format!("unexpected column count {width}")));
    }
    let n = (width - 4) / 4;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|source| TraceError::Csv { path: path.to_path_buf(), source })?;
        let float = |j: usize| -> Result<f64, TraceError> {
            record[j].parse().map_err(|_| malformed(format!("row {}: bad number {:?}", line + 1, &record[j])))
        };
        let count = |j: usize| -> Result<usize, TraceError> {
            record[j].parse().map_err(|_| malformed(format!("row {}: bad count {:?}", line + 1, &record[j])))
        };
        let block = |b: usize| (0..n).map(|i| float(1 + b * n + i)).collect::<Result<Vec<_>, _>>();
        rows.push(TableRow {
            k: count(0)?,
            v_ref: block(0)?,
            v: block(1)?,
            xi: block(2)?,
            payments: block(3)?,
            phi_e: float(4 * n + 1)?,
            grad_norm: float(4 * n + 2)?,
            inner_iters: count(4 * n + 3)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub k: usize,
    pub v_ref: Vec<f64>,
    pub voltages: Vec<f64>,
    pub xi: Vec<f64>,
    pub payments: Vec<f64>,
    pub phi_e: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningDigest {
    pub mu: f64,
    pub l_f: f64,
    pub eta: f64,
    pub theta: Option<f64>,
    /// Absent when any tariff keeps the game well posed.
    pub gamma_max: Option<f64>,
}

impl From<&GameConditioning> for ConditioningDigest {
    fn from(c: &GameConditioning) -> Self {
        Self {
            mu: c.mu,
            l_f: c.l_f,
            eta: c.eta,
            theta: c.theta,
            gamma_max: c.gamma_max.is_finite().then_some(c.gamma_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDigest {
    pub at_outer_iter: usize,
    /// 1-based DSO number.
    pub dso: usize,
    pub q_min: f64,
    pub q_max: f64,
    pub xi_before: f64,
    pub xi_after: f64,
}

/// Contents of `summary.json`. Bus and DSO numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub gamma: f64,
    pub dso_buses: Vec<usize>,
    pub band: [f64; 2],
    pub outer_iterations: usize,
    pub converged: bool,
    pub initial_voltages: Vec<f64>,
    pub final_state: Option<FinalState>,
    pub final_voltages_in_band: bool,
    pub conditioning: ConditioningDigest,
    pub disturbances: Vec<EventDigest>,
    pub oracle: Vec<OracleDigest>,
    pub all_oracles_passed: bool,
    /// Set when the run aborted; the table then holds the rows up to the
    /// failure.
    pub failure: Option<String>,
}

impl Summary {
    pub fn new(
        scenario: &str,
        trace: &ScenarioTrace,
        band: (f64, f64),
        conditioning: &GameConditioning,
        oracle: &[OracleReport],
    ) -> Self {
        let final_state = trace.last().map(|r| FinalState {
            k: r.k,
            v_ref: r.v_ref.as_slice().to_vec(),
            voltages: r.v.as_slice().to_vec(),
            xi: r.xi.as_slice().to_vec(),
            payments: r.payments.as_slice().to_vec(),
            phi_e: r.phi_e,
            grad_norm: r.grad_norm,
        });
        let final_voltages_in_band =
            final_state.as_ref().is_some_and(|f| f.voltages.iter().all(|&v| v >= band.0 && v <= band.1));
        Self {
            scenario: scenario.to_string(),
            gamma: trace.gamma,
            dso_buses: trace.dso_buses.iter().map(|b| b + 1).collect(),
            band: [band.0, band.1],
            outer_iterations: trace.rows.len(),
            converged: trace.converged,
            initial_voltages: trace.initial_v.as_slice().to_vec(),
            final_state,
            final_voltages_in_band,
            conditioning: conditioning.into(),
            disturbances: trace
                .events
                .iter()
                .map(|e| EventDigest {
                    at_outer_iter: e.disturbance.at_outer_iter,
                    dso: e.disturbance.dso_index + 1,
                    q_min: e.disturbance.new_q_min,
                    q_max: e.disturbance.new_q_max,
                    xi_before: e.xi_before,
                    xi_after: e.xi_after,
                })
                .collect(),
            oracle: oracle.iter().map(OracleDigest::from).collect(),
            all_oracles_passed: oracle.iter().all(|r| r.passed),
            failure: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self, TraceError> {
        let text = fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| TraceError::Json { path: path.to_path_buf(), source })
    }
}

/// Paths of the files written for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceFiles {
    pub table: PathBuf,
    pub summary: PathBuf,
}

/// Writes the table and the summary into `out_dir`, creating it if needed.
pub fn write_trace(trace: &ScenarioTrace, summary: &Summary, out_dir: &Path) -> Result<TraceFiles, TraceError> {
    fs::create_dir_all(out_dir).map_err(|source| TraceError::Io { path: out_dir.to_path_buf(), source })?;
    let files = TraceFiles { table: out_dir.join(TABLE_FILE), summary: out_dir.join(SUMMARY_FILE) };
    write_table(trace, &files.table)?;
    let file = File::create(&files.summary).map_err(|source| TraceError::Io { path: files.summary.clone(), source })?;
    serde_json::to_writer_pretty(BufWriter::new(file), summary)
        .map_err(|source| TraceError::Json { path: files.summary.clone(), source })?;
    Ok(files)
}
