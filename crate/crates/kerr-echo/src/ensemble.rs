//! Monte Carlo campaigns over drive realizations: gain statistics, power-law
//! fits of information versus probe brightness, parameter-grid sweeps, and
//! drive-noise robustness tables.
//!
//! Every campaign is a pure function of its seeds. Realizations run in
//! parallel, but records are aggregated in seed order, so the output is
//! byte-identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::metrology::{optimize_bias, MetrologyRecord};
use crate::protocol::ProtocolConfig;
use crate::pulse::FluctuationSpec;

/// A realization rejected by a numerical guard, kept for the record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExcludedRealization {
    pub seed: u64,
    pub error: String,
}

/// One ensemble's records and summary statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub records: Vec<MetrologyRecord>,
    pub mean_gain: f64,
    pub std_gain: f64,
    /// `(a, b)` of `cfi_max = a n_mean^b`, when the fit is well posed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub powerlaw: Option<(f64, f64)>,
    /// `(c, e)` of `theta_b = c n_mean^e`, spacing-weighted (see
    /// [`fit_power_law`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thetab_powerlaw: Option<(f64, f64)>,
    /// The unweighted counterpart, reported alongside since the weighting is
    /// a convention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thetab_powerlaw_unweighted: Option<(f64, f64)>,
    /// `(mu, sigma)` of the gain histogram.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<(f64, f64)>,
    pub n_requested: usize,
    pub excluded: Vec<ExcludedRealization>,
}

impl EnsembleSummary {
    pub fn n_excluded(&self) -> usize {
        self.excluded.len()
    }
}

/// Mean and unbiased standard deviation; a single value has spread 0.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Sample mean and unbiased sample standard deviation.
pub fn fit_gaussian(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(SimError::InsufficientPoints {
            context: "gaussian fit".into(),
            got: values.len(),
            need: 2,
        });
    }
    Ok(mean_std(values))
}

/// Least-squares power law `y = a x^b` on `(ln x, ln y)`.
///
/// The weighted mode assigns each point the half-gap to its neighbors in
/// `ln x` (a density inverse), so clusters of nearby points count once rather
/// than by their multiplicity. On data lying exactly on a power law, both
/// modes recover it to full precision.
pub fn fit_power_law(points: &[(f64, f64)], weighted: bool) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(SimError::InsufficientPoints {
            context: "power-law fit".into(),
            got: points.len(),
            need: 3,
        });
    }
    for (i, &(x, y)) in points.iter().enumerate() {
        if !(x > 0.0) {
            return Err(SimError::NonPositiveData { context: "power-law x".into(), index: i, value: x });
        }
        if !(y > 0.0) {
            return Err(SimError::NonPositiveData { context: "power-law y".into(), index: i, value: y });
        }
    }
    let mut logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    logs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = logs.len();
    if logs[0].0 == logs[n - 1].0 {
        return Err(SimError::InsufficientPoints {
            context: "power-law fit needs distinct x values".into(),
            got: 1,
            need: 2,
        });
    }
    let weights: Vec<f64> = if weighted {
        (0..n)
            .map(|i| {
                let lo = if i == 0 { logs[0].0 } else { logs[i - 1].0 };
                let hi = if i + 1 == n { logs[n - 1].0 } else { logs[i + 1].0 };
                0.5 * (hi - lo)
            })
            .collect()
    } else {
        vec![1.0; n]
    };
    let wsum: f64 = weights.iter().sum();
    let xbar = logs.iter().zip(&weights).map(|(l, w)| w * l.0).sum::<f64>() / wsum;
    let ybar = logs.iter().zip(&weights).map(|(l, w)| w * l.1).sum::<f64>() / wsum;
    let sxx: f64 = logs.iter().zip(&weights).map(|(l, w)| w * (l.0 - xbar) * (l.0 - xbar)).sum();
    let sxy: f64 = logs.iter().zip(&weights).map(|(l, w)| w * (l.0 - xbar) * (l.1 - ybar)).sum();
    let b = sxy / sxx;
    let a = (ybar - b * xbar).exp();
    Ok((a, b))
}

fn power_points<F: Fn(&MetrologyRecord) -> (f64, f64)>(
    records: &[MetrologyRecord],
    f: F,
) -> Vec<(f64, f64)> {
    records.iter().map(|r| f(r)).collect()
}

fn summarize(
    records: Vec<MetrologyRecord>,
    excluded: Vec<ExcludedRealization>,
    n_requested: usize,
) -> EnsembleSummary {
    let gains: Vec<f64> = records.iter().map(|r| r.gain_max).collect();
    let (mean_gain, std_gain) = mean_std(&gains);
    let powerlaw = fit_power_law(&power_points(&records, |r| (r.n_mean, r.cfi_max)), false).ok();
    let thetab_points = power_points(&records, |r| (r.n_mean, r.theta_b));
    let thetab_powerlaw = fit_power_law(&thetab_points, true).ok();
    let thetab_powerlaw_unweighted = fit_power_law(&thetab_points, false).ok();
    let gaussian = fit_gaussian(&gains).ok();
    EnsembleSummary {
        records,
        mean_gain,
        std_gain,
        powerlaw,
        thetab_powerlaw,
        thetab_powerlaw_unweighted,
        gaussian,
        n_requested,
        excluded,
    }
}

/// Realization `k` of a campaign: the base configuration with seed
/// `seed_base + k`. A configured fluctuation draw is re-seeded the same way,
/// so noise is fresh per realization.
fn realization_config(base: &ProtocolConfig, seed: u64) -> ProtocolConfig {
    let mut config = base.clone();
    config.seed = seed;
    if let Some(spec) = &mut config.fluctuation {
        spec.seed = seed;
    }
    config
}

/// Run `n_realizations` independent realizations and aggregate. Guard
/// failures (truncation, convergence) are excluded from statistics and
/// returned with their errors; anything else would bias the ensemble
/// silently.
pub fn run_ensemble(
    base_config: &ProtocolConfig,
    n_realizations: usize,
    seed_base: u64,
) -> Result<EnsembleSummary> {
    if n_realizations == 0 {
        return Err(SimError::InvalidConfig("ensemble needs at least one realization".into()));
    }
    base_config.validate()?;
    let outcomes: Vec<(u64, Result<MetrologyRecord>)> = (0..n_realizations as u64)
        .into_par_iter()
        .map(|k| {
            let seed = seed_base + k;
            (seed, optimize_bias(&realization_config(base_config, seed)))
        })
        .collect();
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(err) => excluded.push(ExcludedRealization { seed, error: err.to_string() }),
        }
    }
    if records.is_empty() {
        return Err(SimError::AllRealizationsFailed {
            attempted: n_realizations,
            first_error: excluded[0].error.clone(),
        });
    }
    Ok(summarize(records, excluded, n_realizations))
}

/// A cell of a parameter sweep that produced no usable realizations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellFailure {
    pub row: usize,
    pub col: usize,
    pub error: String,
}

/// Gain statistics over a (drive strength) x (total time) grid.
/// Rows index `chiT_values`, columns index `eps_values`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepGrid {
    pub eps_values: Vec<f64>,
    #[serde(rename = "chiT_values")]
    pub chit_values: Vec<f64>,
    pub mean_matrix: Vec<Vec<f64>>,
    pub std_matrix: Vec<Vec<f64>>,
    /// Per-cell count of guard-excluded realizations.
    pub excluded_matrix: Vec<Vec<usize>>,
    pub n_realizations: usize,
    /// Cells whose every realization failed; their matrix entries are NaN.
    pub failures: Vec<CellFailure>,
}

/// One ensemble per grid cell. Cell `(r, c)` (row-major index `i`) runs with
/// seed base `seed_base + 1_000_000 i`, so cells never share seeds for up to
/// a million realizations each.
pub fn sweep_heatmap(
    base_config: &ProtocolConfig,
    eps_values: &[f64],
    chit_values: &[f64],
    n_realizations: usize,
    seed_base: u64,
) -> Result<SweepGrid> {
    if eps_values.is_empty() || chit_values.is_empty() {
        return Err(SimError::InvalidConfig("sweep axes must be non-empty".into()));
    }
    let ncols = eps_values.len();
    let cells: Vec<Result<EnsembleSummary>> = (0..chit_values.len() * ncols)
        .into_par_iter()
        .map(|i| {
            let mut config = base_config.clone();
            config.chi_t = chit_values[i / ncols];
            config.epsilon = eps_values[i % ncols];
            run_ensemble(&config, n_realizations, seed_base + 1_000_000 * i as u64)
        })
        .collect();

    let mut mean_matrix = Vec::with_capacity(chit_values.len());
    let mut std_matrix = Vec::with_capacity(chit_values.len());
    let mut excluded_matrix = Vec::with_capacity(chit_values.len());
    let mut failures = Vec::new();
    for (r, row) in cells.chunks(ncols).enumerate() {
        let mut means = Vec::with_capacity(ncols);
        let mut stds = Vec::with_capacity(ncols);
        let mut excl = Vec::with_capacity(ncols);
        for (c, cell) in row.iter().enumerate() {
            match cell {
                Ok(summary) => {
                    means.push(summary.mean_gain);
                    stds.push(summary.std_gain);
                    excl.push(summary.n_excluded());
                }
                Err(err) => {
                    means.push(f64::NAN);
                    stds.push(f64::NAN);
                    excl.push(n_realizations);
                    failures.push(CellFailure { row: r, col: c, error: err.to_string() });
                }
            }
        }
        mean_matrix.push(means);
        std_matrix.push(stds);
        excluded_matrix.push(excl);
    }
    Ok(SweepGrid {
        eps_values: eps_values.to_vec(),
        chit_values: chit_values.to_vec(),
        mean_matrix,
        std_matrix,
        excluded_matrix,
        n_realizations,
        failures,
    })
}

/// One row of a drive-noise robustness table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationPoint {
    /// Noise level relative to the drive scale.
    pub delta_over_eps: f64,
    /// Absolute noise standard deviation.
    pub delta_eps: f64,
    pub mean_gain: f64,
    pub std_gain: f64,
    pub n_records: usize,
    pub n_excluded: usize,
}

/// Gain statistics as a function of relative drive-noise strength. Values in
/// `delta_over_eps_values` scale the configured drive amplitude `epsilon`;
/// 0 turns noise off entirely, reproducing [`run_ensemble`] exactly.
pub fn fluctuation_sweep(
    base_config: &ProtocolConfig,
    delta_over_eps_values: &[f64],
    n_realizations: usize,
    seed_base: u64,
) -> Result<Vec<FluctuationPoint>> {
    let mut table = Vec::with_capacity(delta_over_eps_values.len());
    for (i, &rel) in delta_over_eps_values.iter().enumerate() {
        if !(rel >= 0.0) || !rel.is_finite() {
            return Err(SimError::InvalidConfig(format!(
                "relative noise strength {rel} at index {i} must be non-negative and finite"
            )));
        }
        let mut config = base_config.clone();
        config.fluctuation = if rel == 0.0 {
            None
        } else {
            // seed is per-realization, set by the ensemble driver
            Some(FluctuationSpec { delta_eps: rel * config.epsilon, seed: 0 })
        };
        let summary = run_ensemble(&config, n_realizations, seed_base)?;
        table.push(FluctuationPoint {
            delta_over_eps: rel,
            delta_eps: rel * config.epsilon,
            mean_gain: summary.mean_gain,
            std_gain: summary.std_gain,
            n_records: summary.records.len(),
            n_excluded: summary.n_excluded(),
        });
    }
    Ok(table)
}
