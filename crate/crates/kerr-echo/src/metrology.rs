//! Fisher-information analysis of a protocol instance: classical Fisher
//! information of the readout, the gain over the shot-noise reference
//! `4 <n>`, the pure-state quantum bound `4 Var(n)`, and the search for the
//! bias point that maximizes the classical information.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fock::DensityMatrix;
use crate::protocol::{ProtocolConfig, ProtocolEvaluator};
use crate::pulse::PulseKind;

/// Outcomes with probability at or below this floor are excluded from the
/// information sum (their slope must be negligible, or the distribution is
/// declared degenerate).
pub const P_FLOOR: f64 = 1e-12;

/// Grid resolution of the bias scan before golden-section refinement.
const SCAN_POINTS: usize = 400;

/// One analyzed realization. Carries the scalar configuration facets so a
/// record is self-describing in CSV and JSON form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetrologyRecord {
    pub seed: u64,
    pub kind: PulseKind,
    pub d: usize,
    pub epsilon: f64,
    #[serde(rename = "chiT")]
    pub chi_t: f64,
    pub tau: f64,
    pub kappa: f64,
    pub eps_dp: f64,
    pub n_mean: f64,
    pub n_var: f64,
    /// Bias point maximizing the classical Fisher information.
    pub theta_b: f64,
    pub cfi_max: f64,
    /// `cfi_max / (4 n_mean)`; 1 is the shot-noise line. 0 for a vacuum probe.
    pub gain_max: f64,
    /// Pure-state quantum bound `4 Var(n)`; absent when loss makes the probe
    /// mixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qfi: Option<f64>,
    /// The sampled `(theta, cfi)` scan, when retained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<[f64; 2]>>,
}

/// Classical Fisher information of one outcome distribution:
/// `sum_n (dp_n)^2 / p_n` over outcomes above [`P_FLOOR`].
pub fn cfi(probs: &[f64], dprobs: &[f64]) -> Result<f64> {
    if probs.len() != dprobs.len() {
        return Err(SimError::InvalidConfig(format!(
            "probability and derivative lengths differ: {} vs {}",
            probs.len(),
            dprobs.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&p, &dp)) in probs.iter().zip(dprobs).enumerate() {
        if p > P_FLOOR {
            total += dp * dp / p;
        } else if dp.abs() > 1e-6 {
            return Err(SimError::DegenerateDistribution {
                outcome: i,
                prob: p,
                slope: dp.abs(),
            });
        }
    }
    Ok(total)
}

/// Gain over the shot-noise reference: `cfi / (4 n_mean)`.
pub fn gain(cfi_value: f64, n_mean: f64) -> Result<f64> {
    if n_mean <= P_FLOOR {
        return Err(SimError::ZeroPhotonProbe { n_mean });
    }
    Ok(cfi_value / (4.0 * n_mean))
}

/// Quantum bound for a pure probe under the number generator: `4 Var(n)`.
pub fn qfi_pure(probe: &DensityMatrix) -> Result<f64> {
    let purity = probe.purity();
    let threshold = 1.0 - 1e-6;
    if purity <= threshold {
        return Err(SimError::MixedStateInput { purity, threshold });
    }
    let (_, n_var) = probe.number_moments();
    Ok(4.0 * n_var)
}

/// Width of the bias scan window: brighter probes concentrate their optimum
/// near 0, so the window shrinks with the mean photon number (with a wide
/// safety factor), capped at pi.
pub fn scan_window(n_mean: f64) -> f64 {
    PI.min(8.0 * PI / (1.0 + n_mean))
}

/// Golden-section maximization on `[a, b]` down to interval width 1e-6.
fn golden_max<F: Fn(f64) -> Result<f64>>(mut a: f64, mut b: f64, f: F) -> Result<(f64, f64)> {
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > 1e-6 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc > fd { (c, fc) } else { (d, fd) })
}

/// Scan the bias window and refine the best point. See [`optimize_bias`].
fn optimize(config: &ProtocolConfig, n_grid: usize, keep_curve: bool) -> Result<MetrologyRecord> {
    let eval = ProtocolEvaluator::new(config)?;
    let n_mean = eval.n_mean();
    let n_var = eval.n_var();
    let cfi_at = |theta: f64| -> Result<f64> {
        let (p, dp) = eval.probabilities(theta);
        cfi(&p, &dp)
    };

    let window = scan_window(n_mean);
    let grid: Vec<(f64, f64)> = (1..=n_grid)
        .into_par_iter()
        .map(|j| {
            let theta = window * j as f64 / n_grid as f64;
            cfi_at(theta).map(|v| (theta, v))
        })
        .collect::<Result<_>>()?;

    // serial argmax over the ordered grid: worker count cannot change it
    let mut jbest = 0;
    for (j, &(_, v)) in grid.iter().enumerate() {
        if v > grid[jbest].1 {
            jbest = j;
        }
    }
    // the window is open at zero, where every outcome probability vanishes
    // quadratically and the information floor would trip; the refinement
    // bracket stays off that edge by half a grid spacing
    let lo = if jbest == 0 { 0.5 * grid[0].0 } else { grid[jbest - 1].0 };
    let hi = if jbest + 1 < grid.len() { grid[jbest + 1].0 } else { window };
    let (mut theta_b, mut cfi_max) = golden_max(lo, hi, &cfi_at)?;
    if grid[jbest].1 > cfi_max {
        theta_b = grid[jbest].0;
        cfi_max = grid[jbest].1;
    }

    let gain_max = if n_mean <= P_FLOOR { 0.0 } else { gain(cfi_max, n_mean)? };
    Ok(MetrologyRecord {
        seed: config.seed,
        kind: config.kind,
        d: config.d,
        epsilon: config.epsilon,
        chi_t: config.chi_t,
        tau: config.tau,
        kappa: config.kappa,
        eps_dp: config.eps_dp,
        n_mean,
        n_var,
        theta_b,
        cfi_max,
        gain_max,
        qfi: (config.kappa == 0.0).then_some(4.0 * n_var),
        curve: keep_curve.then(|| grid.iter().map(|&(t, v)| [t, v]).collect()),
    })
}

/// Maximize the classical Fisher information over the bias point: a uniform
/// 400-point scan of the window, then golden-section refinement of the best
/// bracket. Grid evaluations run in parallel; the result does not depend on
/// the worker count.
pub fn optimize_bias(config: &ProtocolConfig) -> Result<MetrologyRecord> {
    optimize(config, SCAN_POINTS, false)
}

/// [`optimize_bias`], retaining the sampled scan in `curve`.
pub fn optimize_bias_traced(config: &ProtocolConfig) -> Result<MetrologyRecord> {
    optimize(config, SCAN_POINTS, true)
}
