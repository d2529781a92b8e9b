//! Renders results to portable text formats and parses them back.
//!
//! Everything here is string-in/string-out; no file handles. Callers own
//! placement and atomicity. Float fields go through Rust's shortest
//! round-trip formatting, so rendering the same data twice yields identical
//! bytes and parsing recovers the exact values.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{FluctuationPoint, SweepGrid};
use crate::error::{Result, SimError};
use crate::metrology::MetrologyRecord;
use crate::pulse::PulseKind;
use crate::wigner::{Stage, WignerGrid};

fn render_err(what: &str, e: impl std::fmt::Display) -> SimError {
    SimError::InvalidConfig(format!("{what}: {e}"))
}

/// Hex SHA-256 of the compact JSON form; the identity stamp carried by
/// result sidecars and manifests.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value).map_err(|e| render_err("hash serialization", e))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// Pretty JSON with a trailing newline, for files meant to be read by eye.
pub fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| render_err("serialization", e))?;
    Ok(text + "\n")
}

/// Flat CSV row mirror of `MetrologyRecord`; the scan curve never travels
/// through CSV.
#[derive(Debug, Serialize, Deserialize)]
struct RecordRow {
    seed: u64,
    kind: PulseKind,
    d: usize,
    epsilon: f64,
    #[serde(rename = "chiT")]
    chi_t: f64,
    tau: f64,
    kappa: f64,
    eps_dp: f64,
    n_mean: f64,
    n_var: f64,
    theta_b: f64,
    cfi_max: f64,
    gain_max: f64,
    qfi: Option<f64>,
}

impl From<&MetrologyRecord> for RecordRow {
    fn from(r: &MetrologyRecord) -> Self {
        RecordRow {
            seed: r.seed,
            kind: r.kind,
            d: r.d,
            epsilon: r.epsilon,
            chi_t: r.chi_t,
            tau: r.tau,
            kappa: r.kappa,
            eps_dp: r.eps_dp,
            n_mean: r.n_mean,
            n_var: r.n_var,
            theta_b: r.theta_b,
            cfi_max: r.cfi_max,
            gain_max: r.gain_max,
            qfi: r.qfi,
        }
    }
}

impl From<RecordRow> for MetrologyRecord {
    fn from(r: RecordRow) -> Self {
        MetrologyRecord {
            seed: r.seed,
            kind: r.kind,
            d: r.d,
            epsilon: r.epsilon,
            chi_t: r.chi_t,
            tau: r.tau,
            kappa: r.kappa,
            eps_dp: r.eps_dp,
            n_mean: r.n_mean,
            n_var: r.n_var,
            theta_b: r.theta_b,
            cfi_max: r.cfi_max,
            gain_max: r.gain_max,
            qfi: r.qfi,
            curve: None,
        }
    }
}

/// One CSV row per record; empty `qfi` cell when none was defined.
pub fn records_csv(records: &[MetrologyRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(RecordRow::from(r)).map_err(|e| render_err("record row", e))?;
    }
    let bytes = w.into_inner().map_err(|e| render_err("record csv", e))?;
    String::from_utf8(bytes).map_err(|e| render_err("record csv", e))
}

/// Parse a records CSV back; scan curves do not survive the trip.
pub fn parse_records_csv(text: &str) -> Result<Vec<MetrologyRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rd.deserialize::<RecordRow>() {
        let row = row.map_err(|e| render_err("records CSV schema", e))?;
        out.push(row.into());
    }
    Ok(out)
}

fn axis_matrix_csv(corner: &str, cols: &[f64], rows: &[f64], values: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![corner.to_string()];
    header.extend(cols.iter().map(|v| v.to_string()));
    w.write_record(&header).map_err(|e| render_err("matrix header", e))?;
    for (r, row) in rows.iter().zip(values) {
        let mut rec = vec![r.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| render_err("matrix row", e))?;
    }
    let bytes = w.into_inner().map_err(|e| render_err("matrix csv", e))?;
    String::from_utf8(bytes).map_err(|e| render_err("matrix csv", e))
}

/// Mean-gain matrix with axis values in the first row and column
/// (rows are `chiT`, columns are `epsilon`).
pub fn sweep_mean_csv(grid: &SweepGrid) -> Result<String> {
    axis_matrix_csv("chiT", &grid.eps_values, &grid.chit_values, &grid.mean_matrix)
}

/// Companion matrix of gain standard deviations, same layout.
pub fn sweep_std_csv(grid: &SweepGrid) -> Result<String> {
    axis_matrix_csv("chiT", &grid.eps_values, &grid.chit_values, &grid.std_matrix)
}

/// Drive-noise robustness table.
pub fn fluctuation_csv(points: &[FluctuationPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| render_err("fluctuation row", e))?;
    }
    let bytes = w.into_inner().map_err(|e| render_err("fluctuation csv", e))?;
    String::from_utf8(bytes).map_err(|e| render_err("fluctuation csv", e))
}

/// Wigner values as a matrix: first row holds the `p` axis, first column the
/// `x` axis.
pub fn wigner_csv(grid: &WignerGrid) -> Result<String> {
    axis_matrix_csv("x", &grid.p_axis, &grid.x_axis, &grid.values)
}

/// Metadata written next to each Wigner CSV so the matrix is
/// self-describing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WignerSidecar {
    pub stage: Stage,
    pub theta: f64,
    pub half_extent: f64,
    pub resolution: usize,
    pub cell_area: f64,
    /// Phase-space convention of the axes.
    pub alpha_convention: String,
    pub config_hash: String,
}

impl WignerSidecar {
    pub fn new(stage: Stage, theta: f64, grid: &WignerGrid, config_hash: String) -> Self {
        WignerSidecar {
            stage,
            theta,
            half_extent: grid.x_axis.last().copied().unwrap_or(0.0),
            resolution: grid.x_axis.len(),
            cell_area: grid.cell_area,
            alpha_convention: "alpha = (x + i p) / sqrt(2)".to_string(),
            config_hash,
        }
    }
}
