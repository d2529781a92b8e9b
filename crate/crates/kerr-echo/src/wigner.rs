//! Phase-space maps of protocol states, in the displaced-parity form
//! `W(alpha) = (2/pi) tr(rho D(2 alpha) Pi)`.
//!
//! Displacement matrix elements come from the closed-form expression, which
//! is exact per element on the truncated space; the resulting grid is the
//! exact Wigner transform of the matrix it is given (how faithfully that
//! matrix represents the physical state is the propagator tail guard's
//! business, settled before anything reaches this module). Each point is an
//! independent trace, so grids parallelize trivially and deterministically.

use std::f64::consts::FRAC_2_PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fock::{displacement_matrix, DensityMatrix};
use crate::propagator::{evolve_lindblad_with, evolve_unitary_channel_with, EvolveOptions};
use crate::protocol::{prepare_probe, LossScope, ProtocolConfig};
use crate::C64;

/// Points of the protocol a phase-space snapshot can be taken at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Vacuum, before anything acts.
    Initial,
    /// After the forward drive train.
    PostPrep,
    /// After phase encoding.
    PostProbe,
    /// After the time-reversed train (before the depolarizer).
    PostEcho,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::PostPrep => "post_prep",
            Stage::PostProbe => "post_probe",
            Stage::PostEcho => "post_echo",
        }
    }
}

/// A sampled Wigner function over a square quadrature window.
///
/// The grid lives in quadrature coordinates with `alpha = (x + i p) / sqrt(2)`,
/// so the vacuum has variance 1/2 in `x`; `values[i][j]` is `W` at
/// `(x_axis[i], p_axis[j])`, in the `alpha` normalization where the function
/// integrates to 1 over the complex plane. `cell_area` is the `alpha`-plane
/// area per sample, `dx dp / 2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WignerGrid {
    pub x_axis: Vec<f64>,
    pub p_axis: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub cell_area: f64,
}

impl WignerGrid {
    /// Riemann sum `sum W cell_area`; near 1 when the window holds the state.
    pub fn total_mass(&self) -> f64 {
        self.values.iter().flatten().sum::<f64>() * self.cell_area
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One Wigner value, `(2/pi) tr(rho D(2 alpha) Pi)`.
pub fn wigner_point(rho: &DensityMatrix, alpha: C64) -> Result<f64> {
    let d = rho.dim().get();
    let dm = displacement_matrix(rho.dim(), alpha * 2.0);
    let mat = rho.matrix();
    let mut acc = C64::new(0.0, 0.0);
    for n in 0..d {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let mut row = C64::new(0.0, 0.0);
        for k in 0..d {
            row += mat[[n, k]] * dm[[k, n]];
        }
        acc += sign * row;
    }
    if acc.im.abs() > 1e-9 {
        return Err(SimError::NonHermitianResult {
            context: format!("Wigner value at alpha = {alpha}"),
            residue: acc.im.abs(),
        });
    }
    Ok(FRAC_2_PI * acc.re)
}

/// Sample the Wigner function on a `resolution x resolution` grid with
/// `x, p` in `[-half_extent, half_extent]`.
pub fn wigner_grid(rho: &DensityMatrix, half_extent: f64, resolution: usize) -> Result<WignerGrid> {
    if resolution < 2 {
        return Err(SimError::InvalidConfig(format!(
            "grid resolution {resolution} must be at least 2"
        )));
    }
    if !(half_extent > 0.0) || !half_extent.is_finite() {
        return Err(SimError::InvalidConfig(format!(
            "half extent {half_extent} must be positive and finite"
        )));
    }
    let step = 2.0 * half_extent / (resolution - 1) as f64;
    let axis: Vec<f64> = (0..resolution).map(|j| -half_extent + step * j as f64).collect();
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let values: Vec<Vec<f64>> = axis
        .par_iter()
        .map(|&x| {
            axis.iter()
                .map(|&p| wigner_point(rho, C64::new(x * inv_sqrt2, p * inv_sqrt2)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(WignerGrid {
        x_axis: axis.clone(),
        p_axis: axis,
        values,
        cell_area: step * step / 2.0,
    })
}

/// A stage's snapshot.
#[derive(Clone, Debug, Serialize)]
pub struct StageSnapshot {
    pub stage: Stage,
    pub grid: WignerGrid,
}

/// Sample the protocol's state at the requested stages of one run. Duplicate
/// stage requests are collapsed; output order follows the protocol, not the
/// request.
pub fn snapshot_protocol(
    config: &ProtocolConfig,
    theta: f64,
    stages: &[Stage],
    half_extent: f64,
    resolution: usize,
) -> Result<Vec<StageSnapshot>> {
    config.validate()?;
    let wanted = |s: Stage| stages.contains(&s);
    let mut shots = Vec::new();

    if wanted(Stage::Initial) {
        let rho = DensityMatrix::vacuum(crate::fock::FockDim::new(config.d)?);
        shots.push(StageSnapshot { stage: Stage::Initial, grid: wigner_grid(&rho, half_extent, resolution)? });
    }
    if !(wanted(Stage::PostPrep) || wanted(Stage::PostProbe) || wanted(Stage::PostEcho)) {
        return Ok(shots);
    }

    let (probe, _) = prepare_probe(config)?;
    if wanted(Stage::PostPrep) {
        shots.push(StageSnapshot { stage: Stage::PostPrep, grid: wigner_grid(&probe, half_extent, resolution)? });
    }
    if !(wanted(Stage::PostProbe) || wanted(Stage::PostEcho)) {
        return Ok(shots);
    }

    let rotated = probe.phase_rotated(theta);
    if wanted(Stage::PostProbe) {
        shots.push(StageSnapshot { stage: Stage::PostProbe, grid: wigner_grid(&rotated, half_extent, resolution)? });
    }
    if wanted(Stage::PostEcho) {
        let (_, echo) = config.trains()?;
        let opts = EvolveOptions::default();
        let echoed = if config.kappa > 0.0 && config.loss_scope == LossScope::Both {
            evolve_lindblad_with(&rotated, &echo, config.kappa, &opts)?.0
        } else {
            evolve_unitary_channel_with(&rotated, &echo, &opts)?.0
        };
        shots.push(StageSnapshot { stage: Stage::PostEcho, grid: wigner_grid(&echoed, half_extent, resolution)? });
    }
    Ok(shots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{displacement, vacuum, FockDim};
    use crate::protocol::{FluctuationScope, PovmKind};
    use crate::pulse::PulseKind;
    use approx::assert_relative_eq;

    fn dim(d: usize) -> FockDim {
        FockDim::new(d).unwrap()
    }

    #[test]
    fn vacuum_core_value_and_symmetry() {
        let rho = DensityMatrix::vacuum(dim(8));
        let w0 = wigner_point(&rho, C64::new(0.0, 0.0)).unwrap();
        assert_relative_eq!(w0, FRAC_2_PI, epsilon = 1e-9);

        // the vacuum Wigner function is rotation symmetric
        let a = wigner_point(&rho, C64::new(0.7, 0.4)).unwrap();
        let b = wigner_point(&rho, C64::new(-0.7, -0.4)).unwrap();
        let c = wigner_point(&rho, C64::new(0.4, -0.7)).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
        assert_relative_eq!(a, c, epsilon = 1e-12);
        // and Gaussian: W = (2/pi) exp(-2 |alpha|^2)
        let expect = FRAC_2_PI * (-2.0 * (0.7f64 * 0.7 + 0.4 * 0.4)).exp();
        assert_relative_eq!(a, expect, epsilon = 1e-12);
    }

    #[test]
    fn single_photon_state_has_a_negative_core() {
        let rho = DensityMatrix::number_projector(dim(8), 1).unwrap();
        let w0 = wigner_point(&rho, C64::new(0.0, 0.0)).unwrap();
        assert_relative_eq!(w0, -FRAC_2_PI, epsilon = 1e-9);
    }

    #[test]
    fn core_value_reads_parity_exactly() {
        let d = dim(6);
        let rho = DensityMatrix::number_projector(d, 0)
            .unwrap()
            .mix(&DensityMatrix::number_projector(d, 1).unwrap(), 0.5)
            .mix(&DensityMatrix::number_projector(d, 2).unwrap(), 0.2);
        // populations: 0.4, 0.4, 0.2 -> <parity> = 0.4 - 0.4 + 0.2
        let w0 = wigner_point(&rho, C64::new(0.0, 0.0)).unwrap();
        assert_relative_eq!(w0, FRAC_2_PI * 0.2, epsilon = 1e-12);
    }

    #[test]
    fn vacuum_grid_is_normalized() {
        let rho = DensityMatrix::vacuum(dim(8));
        let grid = wigner_grid(&rho, 5.0, 101).unwrap();
        assert!((grid.total_mass() - 1.0).abs() < 1e-3, "mass {}", grid.total_mass());
        assert_eq!(grid.values.len(), 101);
        assert_eq!(grid.values[0].len(), 101);
        assert_relative_eq!(grid.cell_area, 0.1 * 0.1 / 2.0, epsilon = 1e-15);
        // center sample sits at the origin
        assert_relative_eq!(grid.values[50][50], FRAC_2_PI, epsilon = 1e-9);
    }

    #[test]
    fn displaced_state_grid_is_normalized_and_centered() {
        let d = dim(32);
        let op = displacement(d, C64::new(1.2, 0.0)).unwrap();
        let rho = op.apply(&vacuum(d)).unwrap().to_density();
        let grid = wigner_grid(&rho, 6.0, 81).unwrap();
        assert!((grid.total_mass() - 1.0).abs() < 1e-3, "mass {}", grid.total_mass());
        // peak near x = 1.2 sqrt(2), p = 0
        let (mut bx, mut bp, mut best) = (0, 0, f64::NEG_INFINITY);
        for (i, row) in grid.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    bx = i;
                    bp = j;
                }
            }
        }
        assert!((grid.x_axis[bx] - 1.2 * std::f64::consts::SQRT_2).abs() < 0.2);
        assert!(grid.p_axis[bp].abs() < 0.2);
    }

    #[test]
    fn grid_rotates_with_the_state() {
        let d = dim(32);
        let op = displacement(d, C64::new(1.2, 0.0)).unwrap();
        let rho = op.apply(&vacuum(d)).unwrap().to_density();
        let theta = 0.5;
        // step 0.05 keeps bilinear interpolation error below the 1e-3 gate
        let base = wigner_grid(&rho, 3.2, 129).unwrap();
        let turned = wigner_grid(&rho.phase_rotated(theta), 3.2, 129).unwrap();

        // W_turned(x, p) = W_base at the point rotated by +theta
        let sample = |g: &WignerGrid, x: f64, p: f64| -> f64 {
            let step = g.x_axis[1] - g.x_axis[0];
            let fx = (x - g.x_axis[0]) / step;
            let fp = (p - g.p_axis[0]) / step;
            let (ix, ip) = (fx.floor() as usize, fp.floor() as usize);
            let (tx, tp) = (fx - ix as f64, fp - ip as f64);
            let v00 = g.values[ix][ip];
            let v10 = g.values[ix + 1][ip];
            let v01 = g.values[ix][ip + 1];
            let v11 = g.values[ix + 1][ip + 1];
            v00 * (1.0 - tx) * (1.0 - tp)
                + v10 * tx * (1.0 - tp)
                + v01 * (1.0 - tx) * tp
                + v11 * tx * tp
        };
        let (sin, cos) = theta.sin_cos();
        for (i, &x) in turned.x_axis.iter().enumerate() {
            for (j, &p) in turned.p_axis.iter().enumerate() {
                if x * x + p * p > 2.4f64 * 2.4 {
                    continue;
                }
                let xr = x * cos - p * sin;
                let pr = x * sin + p * cos;
                let want = sample(&base, xr, pr);
                assert!(
                    (turned.values[i][j] - want).abs() < 1e-3,
                    "at ({x:.2}, {p:.2}): {} vs {want}",
                    turned.values[i][j]
                );
            }
        }
    }

    #[test]
    fn reality_guard_rejects_non_hermitian_input() {
        let d = dim(4);
        let mut mat = DensityMatrix::vacuum(d).matrix().clone();
        mat[[0, 1]] = C64::new(0.3, 0.2); // no conjugate partner
        let rho = DensityMatrix::from_matrix(d, mat).unwrap();
        let err = wigner_point(&rho, C64::new(0.5, 0.1)).unwrap_err();
        assert!(matches!(err, SimError::NonHermitianResult { .. }), "{err}");
    }

    fn config(d: usize, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            d,
            kind: PulseKind::SinglePhoton,
            epsilon: 4.0,
            tau: 0.1,
            chi_t: 0.5,
            kappa: 0.0,
            eps_dp: 0.0,
            povm: PovmKind::Binary,
            seed,
            fluctuation: None,
            fluctuation_scope: FluctuationScope::Both,
            loss_scope: LossScope::Both,
        }
    }

    #[test]
    fn snapshots_follow_the_protocol() {
        let cfg = config(32, 3);
        let shots = snapshot_protocol(
            &cfg,
            0.0,
            &[Stage::Initial, Stage::PostPrep, Stage::PostEcho],
            4.0,
            41,
        )
        .unwrap();
        assert_eq!(shots.len(), 3);
        assert_eq!(shots[0].stage, Stage::Initial);
        assert_eq!(shots[1].stage, Stage::PostPrep);
        assert_eq!(shots[2].stage, Stage::PostEcho);

        // perfect echo at theta = 0: final snapshot is the initial one
        let a = &shots[0].grid;
        let c = &shots[2].grid;
        let worst = a
            .values
            .iter()
            .flatten()
            .zip(c.values.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-6, "echo snapshot deviates by {worst}");

        // the prepared probe is visibly non-classical
        assert!(shots[1].grid.min_value() < -0.01, "min {}", shots[1].grid.min_value());
    }

    #[test]
    fn probe_rotation_shows_up_in_the_probe_stage() {
        let cfg = config(32, 3);
        let still = snapshot_protocol(&cfg, 0.0, &[Stage::PostProbe], 4.0, 31).unwrap();
        let turned = snapshot_protocol(&cfg, 0.8, &[Stage::PostProbe], 4.0, 31).unwrap();
        let diff = still[0]
            .grid
            .values
            .iter()
            .flatten()
            .zip(turned[0].grid.values.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-3, "rotation left the probe snapshot unchanged");
    }
}
