//! Subcommand drivers: resolve inputs, call the library, place artifacts.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use kerr_echo::ensemble::{fit_gaussian, fit_power_law, fluctuation_sweep, run_ensemble, sweep_heatmap};
use kerr_echo::io::{
    config_hash, fluctuation_csv, parse_records_csv, pretty_json, records_csv, sweep_mean_csv,
    sweep_std_csv, wigner_csv, WignerSidecar,
};
use kerr_echo::presets::{preset, preset_names};
use kerr_echo::protocol::{run_protocol, ProtocolConfig};
use kerr_echo::wigner::{snapshot_protocol, Stage};

use crate::artifacts::ManifestBuilder;

/// Argument misuse distinct from the library's own validation errors; maps
/// to the configuration exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

/// Where the protocol configuration comes from.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Named operating point (see `preset-list`)
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON configuration file with exact field names; unknown fields are
    /// rejected
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. --set d=600 or --set povm=ternary; dotted
    /// keys reach nested fields, and values may be JSON
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> anyhow::Result<ProtocolConfig> {
        let mut value: Value = match (&self.preset, &self.config) {
            (Some(name), None) => {
                let cfg = preset(name).ok_or_else(|| {
                    UsageError(format!(
                        "unknown preset '{name}'; shipped presets: {}",
                        preset_names().join(", ")
                    ))
                })?;
                serde_json::to_value(cfg)?
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)?
            }
            (None, None) => {
                return Err(UsageError("provide a configuration via --preset or --config".into()).into())
            }
            (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
        };
        for kv in &self.set {
            apply_override(&mut value, kv)?;
        }
        let cfg: ProtocolConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_override(root: &mut Value, kv: &str) -> anyhow::Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got '{kv}'")))?;
    // bare words (two_photon, ternary) fall back to strings
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| UsageError(format!("--set key '{key}' does not address an object")))?;
        let slot = map.entry(part.to_string()).or_insert(Value::Object(Default::default()));
        if !slot.is_object() {
            *slot = Value::Object(Default::default());
        }
        cur = slot;
    }
    cur.as_object_mut()
        .ok_or_else(|| UsageError(format!("--set key '{key}' does not address an object")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

pub fn cmd_run(cfg: ProtocolConfig, theta: f64, out_dir: &Path) -> anyhow::Result<()> {
    let hash = config_hash(&cfg)?;
    let mut mb = ManifestBuilder::new("run", json!({ "config": cfg, "theta": theta }), hash);
    let outcome = run_protocol(&cfg, theta)?;
    let path = mb.artifact(out_dir, "outcome.json", &pretty_json(&outcome)?)?;
    mb.finish(out_dir)?;
    for (i, (p, dp)) in outcome.probs.iter().zip(&outcome.dprobs).enumerate() {
        println!("p[{i}] = {p:.12}   dp[{i}]/dtheta = {dp:.6e}");
    }
    println!("probe <n> = {:.6}, wrote {}", outcome.n_mean_probe, path.display());
    Ok(())
}

pub fn cmd_ensemble(cfg: ProtocolConfig, n: usize, seed_base: u64, out_dir: &Path) -> anyhow::Result<()> {
    eprintln!("ensemble: {n} realizations, seeds {seed_base}..{}", seed_base + n as u64);
    let summary = run_ensemble(&cfg, n, seed_base)?;
    eprintln!("ensemble: {} kept, {} excluded", summary.records.len(), summary.n_excluded());
    let hash = config_hash(&cfg)?;
    let mut mb = ManifestBuilder::new(
        "ensemble",
        json!({ "config": cfg, "n": n, "seed_base": seed_base }),
        hash,
    );
    mb.exclusions(summary.n_excluded());
    mb.artifact(out_dir, "records.csv", &records_csv(&summary.records)?)?;
    mb.artifact(out_dir, "summary.json", &pretty_json(&summary)?)?;
    mb.finish(out_dir)?;
    println!(
        "mean gain {:.4} (std {:.4}) over {} records -> {}",
        summary.mean_gain,
        summary.std_gain,
        summary.records.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_sweep(
    cfg: ProtocolConfig,
    eps: Vec<f64>,
    chit: Vec<f64>,
    n: usize,
    seed_base: u64,
    out_dir: &Path,
) -> anyhow::Result<()> {
    eprintln!(
        "sweep: {} x {} cells, {n} realizations each",
        chit.len(),
        eps.len()
    );
    let grid = sweep_heatmap(&cfg, &eps, &chit, n, seed_base)?;
    let excluded: usize = grid.excluded_matrix.iter().flatten().sum();
    eprintln!("sweep: done, {excluded} realizations excluded, {} cells failed", grid.failures.len());
    let hash = config_hash(&cfg)?;
    let mut mb = ManifestBuilder::new(
        "sweep",
        json!({
            "config": cfg,
            "eps_values": eps,
            "chiT_values": chit,
            "n": n,
            "seed_base": seed_base,
        }),
        hash,
    );
    mb.exclusions(excluded);
    mb.artifact(out_dir, "sweep_mean.csv", &sweep_mean_csv(&grid)?)?;
    mb.artifact(out_dir, "sweep_std.csv", &sweep_std_csv(&grid)?)?;
    mb.artifact(out_dir, "sweep.json", &pretty_json(&grid)?)?;
    mb.finish(out_dir)?;
    println!("wrote sweep matrices to {}", out_dir.display());
    Ok(())
}

pub fn cmd_fluct(
    cfg: ProtocolConfig,
    deltas: Vec<f64>,
    n: usize,
    seed_base: u64,
    out_dir: &Path,
) -> anyhow::Result<()> {
    eprintln!("fluct: {} noise levels, {n} realizations each", deltas.len());
    let table = fluctuation_sweep(&cfg, &deltas, n, seed_base)?;
    for p in &table {
        eprintln!(
            "fluct: d_eps/eps = {:.4} -> gain {:.4} (std {:.4}), {} excluded",
            p.delta_over_eps, p.mean_gain, p.std_gain, p.n_excluded
        );
    }
    let hash = config_hash(&cfg)?;
    let mut mb = ManifestBuilder::new(
        "fluct",
        json!({ "config": cfg, "delta_over_eps": deltas, "n": n, "seed_base": seed_base }),
        hash,
    );
    mb.exclusions(table.iter().map(|p| p.n_excluded).sum());
    mb.artifact(out_dir, "fluctuation.csv", &fluctuation_csv(&table)?)?;
    mb.artifact(out_dir, "fluctuation.json", &pretty_json(&table)?)?;
    mb.finish(out_dir)?;
    println!("wrote fluctuation table to {}", out_dir.display());
    Ok(())
}

fn parse_stage(name: &str) -> anyhow::Result<Stage> {
    Ok(match name {
        "initial" => Stage::Initial,
        "post_prep" => Stage::PostPrep,
        "post_probe" => Stage::PostProbe,
        "post_echo" => Stage::PostEcho,
        _ => {
            return Err(UsageError(format!(
                "unknown stage '{name}'; use initial, post_prep, post_probe, post_echo"
            ))
            .into())
        }
    })
}

pub fn cmd_wigner(
    cfg: ProtocolConfig,
    theta: f64,
    stage_names: Vec<String>,
    extent: f64,
    resolution: usize,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let stages: Vec<Stage> = stage_names.iter().map(|s| parse_stage(s)).collect::<anyhow::Result<_>>()?;
    let shots = snapshot_protocol(&cfg, theta, &stages, extent, resolution)?;
    let hash = config_hash(&cfg)?;
    let mut mb = ManifestBuilder::new(
        "wigner",
        json!({
            "config": cfg,
            "theta": theta,
            "stages": stages,
            "extent": extent,
            "resolution": resolution,
        }),
        hash.clone(),
    );
    for shot in &shots {
        let base = format!("wigner_{}", shot.stage.as_str());
        mb.artifact(out_dir, &format!("{base}.csv"), &wigner_csv(&shot.grid)?)?;
        let side = WignerSidecar::new(shot.stage, theta, &shot.grid, hash.clone());
        mb.artifact(out_dir, &format!("{base}.json"), &pretty_json(&side)?)?;
        println!(
            "{}: mass {:.4}, min {:.4}",
            shot.stage.as_str(),
            shot.grid.total_mass(),
            shot.grid.min_value()
        );
    }
    mb.finish(out_dir)?;
    Ok(())
}

/// What `fit` extracts from a records CSV.
#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FitMode {
    /// Power law of peak Fisher information against mean photon number
    CfiScaling,
    /// Power law of the optimal bias phase against mean photon number
    ThetabScaling,
    /// Gaussian summary of the gain histogram
    GainHist,
}

#[derive(Debug, Serialize)]
struct FitReport {
    mode: &'static str,
    weighted: bool,
    n_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    /// Largest log-space residual of the fitted power law.
    #[serde(skip_serializing_if = "Option::is_none")]
    max_log_residual: Option<f64>,
    /// Hash of the CSV content the fit was computed from.
    records_hash: String,
}

fn power_report(
    mode: &'static str,
    weighted: bool,
    pts: &[(f64, f64)],
    records_hash: String,
) -> anyhow::Result<FitReport> {
    let (a, b) = fit_power_law(pts, weighted)?;
    let resid = pts
        .iter()
        .map(|&(x, y)| (y.ln() - (a.ln() + b * x.ln())).abs())
        .fold(0.0f64, f64::max);
    Ok(FitReport {
        mode,
        weighted,
        n_points: pts.len(),
        a: Some(a),
        b: Some(b),
        mu: None,
        sigma: None,
        max_log_residual: Some(resid),
        records_hash,
    })
}

pub fn cmd_fit(records: &Path, mode: FitMode, weighted: bool, out_dir: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(records)
        .with_context(|| format!("reading records {}", records.display()))?;
    let recs = parse_records_csv(&text)?;
    let records_hash = config_hash(&text)?;
    let report = match mode {
        FitMode::CfiScaling => {
            let pts: Vec<(f64, f64)> = recs.iter().map(|r| (r.n_mean, r.cfi_max)).collect();
            power_report("cfi_scaling", weighted, &pts, records_hash.clone())?
        }
        FitMode::ThetabScaling => {
            let pts: Vec<(f64, f64)> = recs.iter().map(|r| (r.n_mean, r.theta_b)).collect();
            power_report("thetab_scaling", weighted, &pts, records_hash.clone())?
        }
        FitMode::GainHist => {
            let values: Vec<f64> = recs.iter().map(|r| r.gain_max).collect();
            let (mu, sigma) = fit_gaussian(&values)?;
            FitReport {
                mode: "gain_hist",
                weighted,
                n_points: values.len(),
                a: None,
                b: None,
                mu: Some(mu),
                sigma: Some(sigma),
                max_log_residual: None,
                records_hash: records_hash.clone(),
            }
        }
    };
    let json = pretty_json(&report)?;
    let mut mb = ManifestBuilder::new(
        "fit",
        json!({
            "records": records.display().to_string(),
            "mode": report.mode,
            "weighted": weighted,
        }),
        records_hash,
    );
    mb.artifact(out_dir, "fit_report.json", &json)?;
    mb.finish(out_dir)?;
    print!("{json}");
    Ok(())
}
