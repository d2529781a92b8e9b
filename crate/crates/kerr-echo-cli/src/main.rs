//! `kerr-echo`: simulate a random-pulse Kerr echo interferometer and
//! post-process its metrology campaigns.
//!
//! All quantities are unitless: rates and times in units of the Kerr
//! coefficient. Failures print a machine-readable JSON object on standard
//! error and exit with a category code (see `--help`).

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{ConfigArgs, FitMode, UsageError};
use kerr_echo::SimError;

const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  2  invalid usage or configuration (also used by argument parsing)
  3  truncation guard tripped; raise d or lower the drive
  4  numerical guard tripped (convergence, hermiticity, degenerate statistics)
  5  statistics unavailable (too few points, no surviving realizations, ...)
  6  input/output failure

Environment:
  KERR_ECHO_WORKERS  default worker-thread count (overridden by --workers)";

#[derive(Parser)]
#[command(name = "kerr-echo", version, about, after_help = EXIT_CODE_HELP)]
struct Cli {
    /// Worker threads for parallel campaigns (results do not depend on this)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory result files and the manifest are written into
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one protocol run at a fixed phase
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Encoded phase
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
    },
    /// Monte Carlo ensemble over random pulse realizations
    Ensemble {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of realizations
        #[arg(long)]
        n: usize,
        /// Realization k uses seed seed_base + k
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
    },
    /// One ensemble per cell of a drive-strength x scramble-time grid
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated drive strengths (grid columns)
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
        /// Comma-separated scramble times (grid rows)
        #[arg(long, value_delimiter = ',', required = true)]
        chit: Vec<f64>,
        /// Realizations per cell
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
    },
    /// Gain statistics against relative drive-noise strength
    Fluct {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated relative noise levels (delta eps / eps)
        #[arg(long = "delta-eps", value_delimiter = ',', required = true)]
        delta_eps: Vec<f64>,
        /// Realizations per noise level
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
    },
    /// Phase-space snapshots of selected protocol stages
    Wigner {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        /// Stages to export: initial, post_prep, post_probe, post_echo
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "initial,post_prep,post_probe,post_echo"
        )]
        stages: Vec<String>,
        /// Quadrature half-extent of the grid
        #[arg(long, default_value_t = 8.0)]
        extent: f64,
        /// Samples per axis
        #[arg(long, default_value_t = 101)]
        resolution: usize,
    },
    /// Fit scaling laws or a gain histogram from a records CSV
    Fit {
        /// Records CSV produced by `ensemble`
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum)]
        mode: FitMode,
        /// Weight fit residuals by inverse local point density
        #[arg(long)]
        weighted: bool,
    },
    /// List the shipped presets
    PresetList,
}

fn init_workers(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("KERR_ECHO_WORKERS").ok().and_then(|s| s.parse().ok())
    });
    if let Some(n) = n {
        if n > 0 {
            // a second call would fail; there is exactly one per process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    init_workers(cli.workers);
    let out_dir = &cli.out_dir;
    match cli.command {
        Command::Run { config, theta } => commands::cmd_run(config.resolve()?, theta, out_dir),
        Command::Ensemble { config, n, seed_base } => {
            commands::cmd_ensemble(config.resolve()?, n, seed_base, out_dir)
        }
        Command::Sweep { config, eps, chit, n, seed_base } => {
            commands::cmd_sweep(config.resolve()?, eps, chit, n, seed_base, out_dir)
        }
        Command::Fluct { config, delta_eps, n, seed_base } => {
            commands::cmd_fluct(config.resolve()?, delta_eps, n, seed_base, out_dir)
        }
        Command::Wigner { config, theta, stages, extent, resolution } => {
            commands::cmd_wigner(config.resolve()?, theta, stages, extent, resolution, out_dir)
        }
        Command::Fit { records, mode, weighted } => {
            commands::cmd_fit(&records, mode, weighted, out_dir)
        }
        Command::PresetList => {
            for name in kerr_echo::presets::preset_names() {
                let cfg = kerr_echo::presets::preset(name).expect("listed preset resolves");
                println!(
                    "{name}: {:?} eps={} chiT={} tau={} kappa={} povm={:?}",
                    cfg.kind, cfg.epsilon, cfg.chi_t, cfg.tau, cfg.kappa, cfg.povm
                );
            }
            Ok(())
        }
    }
}

/// Error category -> (machine-readable kind, exit code).
fn classify(e: &anyhow::Error) -> (String, u8) {
    if let Some(sim) = e.downcast_ref::<SimError>() {
        let code = match sim {
            SimError::InvalidConfig(_) => 2,
            SimError::TruncationOverflow { .. } => 3,
            SimError::ConvergenceFailure { .. }
            | SimError::BadHorizon { .. }
            | SimError::NonHermitianResult { .. }
            | SimError::DegenerateDistribution { .. } => 4,
            SimError::InsufficientPoints { .. }
            | SimError::NonPositiveData { .. }
            | SimError::ZeroPhotonProbe { .. }
            | SimError::MixedStateInput { .. }
            | SimError::AllRealizationsFailed { .. } => 5,
        };
        (sim.kind().to_string(), code)
    } else if e.downcast_ref::<UsageError>().is_some() {
        ("InvalidConfig".to_string(), 2)
    } else if e.downcast_ref::<serde_json::Error>().is_some() {
        ("ConfigParse".to_string(), 2)
    } else {
        ("Io".to_string(), 6)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let payload = serde_json::json!({
                "error": kind,
                "message": format!("{e:#}"),
                "exit_code": code,
            });
            eprintln!("{payload}");
            ExitCode::from(code)
        }
    }
}
