//! Piecewise-constant random pulse trains and their time-reversed schedules.
//!
//! A train holds per-step drive amplitudes in Kerr units: `(u1, u2)` are the
//! two real drive quadratures for the single-photon kind, or the real and
//! imaginary parts of the two-photon drive. Amplitudes are drawn uniformly
//! on `[-epsilon, epsilon)` from the counter-based generator in [`crate::rng`],
//! so a train is a pure function of `(kind, epsilon, tau, T, seed)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::{self, Stream};

/// Tolerance on `T/tau` being an integer.
pub const HORIZON_TOL: f64 = 1e-6;

/// Drive topology of a pulse train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    /// Linear drive `u1 (a† + a) + i u2 (a† - a)`.
    SinglePhoton,
    /// Pair drive `u a†² + u* a²` with `u = u1 + i u2`.
    TwoPhoton,
}

/// Which pass of the protocol a fluctuation draw belongs to. The echo pass
/// receives fresh noise rather than a replay of the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FluctuationLeg {
    Forward,
    Echo,
}

/// Gaussian amplitude-noise model: zero-mean, standard deviation `delta_eps`,
/// independent across steps and quadratures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationSpec {
    pub delta_eps: f64,
    pub seed: u64,
}

/// A piecewise-constant drive schedule.
///
/// `u1[k]`, `u2[k]` are active on `t in [k tau, (k+1) tau)`; the total
/// duration is `n_steps * tau`. `kerr_sign` is the sign of the Kerr term the
/// train is meant to run under (-1 for time-reversed schedules). `seed`
/// records provenance; for derived trains (echo, fluctuated) it is the seed
/// of the originating base train.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseTrain {
    pub kind: PulseKind,
    pub tau: f64,
    pub n_steps: usize,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub epsilon: f64,
    pub kerr_sign: i8,
    pub seed: u64,
    /// Noise level injected into this train, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_eps: Option<f64>,
}

impl PulseTrain {
    /// Total duration `n_steps * tau`.
    pub fn total_time(&self) -> f64 {
        self.n_steps as f64 * self.tau
    }

    /// Largest magnitude any stored amplitude may legally have:
    /// `epsilon` for a clean train, `epsilon + 6 delta_eps` after injection
    /// (noise is truncated at six standard deviations).
    pub fn amplitude_bound(&self) -> f64 {
        self.epsilon + 6.0 * self.delta_eps.unwrap_or(0.0)
    }

    /// Internal consistency check used by tests and deserialization callers.
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(SimError::InvalidConfig("pulse train has zero steps".into()));
        }
        if self.u1.len() != self.n_steps || self.u2.len() != self.n_steps {
            return Err(SimError::InvalidConfig(format!(
                "amplitude arrays ({}, {}) do not match n_steps = {}",
                self.u1.len(),
                self.u2.len(),
                self.n_steps
            )));
        }
        if !(self.tau > 0.0) {
            return Err(SimError::InvalidConfig(format!("tau = {} must be > 0", self.tau)));
        }
        if self.kerr_sign != 1 && self.kerr_sign != -1 {
            return Err(SimError::InvalidConfig(format!(
                "kerr_sign = {} must be +1 or -1",
                self.kerr_sign
            )));
        }
        let bound = self.amplitude_bound();
        for (k, (&a, &b)) in self.u1.iter().zip(&self.u2).enumerate() {
            if !(a.abs() <= bound && b.abs() <= bound) {
                return Err(SimError::InvalidConfig(format!(
                    "step {k}: amplitude ({a}, {b}) outside [-{bound}, {bound}]"
                )));
            }
        }
        Ok(())
    }
}

/// Number of steps for a horizon, rejecting non-commensurate `t_total / tau`.
pub fn step_count(tau: f64, t_total: f64) -> Result<usize> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SimError::InvalidConfig(format!("tau = {tau} must be positive and finite")));
    }
    if !(t_total > 0.0) || !t_total.is_finite() {
        return Err(SimError::InvalidConfig(format!(
            "total time = {t_total} must be positive and finite"
        )));
    }
    let ratio = t_total / tau;
    let n = ratio.round();
    if (ratio - n).abs() > HORIZON_TOL || n < 1.0 {
        return Err(SimError::BadHorizon { ratio, tolerance: HORIZON_TOL });
    }
    Ok(n as usize)
}

/// Draw a fresh train: amplitudes uniform on `[-epsilon, epsilon)`, one draw
/// per step and quadrature, `kerr_sign = +1`.
pub fn sample_train(
    kind: PulseKind,
    epsilon: f64,
    tau: f64,
    t_total: f64,
    seed: u64,
) -> Result<PulseTrain> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(SimError::InvalidConfig(format!(
            "epsilon = {epsilon} must be non-negative and finite"
        )));
    }
    let n_steps = step_count(tau, t_total)?;
    let key = rng::stream_key(seed, Stream::Amplitude);
    let mut u1 = Vec::with_capacity(n_steps);
    let mut u2 = Vec::with_capacity(n_steps);
    for k in 0..n_steps as u64 {
        u1.push(rng::uniform_symmetric(key, 2 * k, epsilon));
        u2.push(rng::uniform_symmetric(key, 2 * k + 1, epsilon));
    }
    Ok(PulseTrain {
        kind,
        tau,
        n_steps,
        u1,
        u2,
        epsilon,
        kerr_sign: 1,
        seed,
        delta_eps: None,
    })
}

/// A constant-amplitude train (no randomness); used for analytic checks and
/// hand-built schedules.
pub fn constant_train(
    kind: PulseKind,
    u1: f64,
    u2: f64,
    tau: f64,
    t_total: f64,
) -> Result<PulseTrain> {
    let n_steps = step_count(tau, t_total)?;
    let epsilon = u1.abs().max(u2.abs());
    Ok(PulseTrain {
        kind,
        tau,
        n_steps,
        u1: vec![u1; n_steps],
        u2: vec![u2; n_steps],
        epsilon,
        kerr_sign: 1,
        seed: 0,
        delta_eps: None,
    })
}

/// Add Gaussian amplitude noise (std `spec.delta_eps`), independent per step
/// and quadrature, truncated at six standard deviations so the stored
/// amplitudes stay inside the documented bound. The draw depends on
/// `(spec.seed, leg, step, quadrature)` only, so the forward and echo passes
/// of one protocol run receive independent noise from the same spec.
pub fn inject_fluctuations(
    train: &PulseTrain,
    spec: &FluctuationSpec,
    leg: FluctuationLeg,
) -> Result<PulseTrain> {
    if !(spec.delta_eps >= 0.0) || !spec.delta_eps.is_finite() {
        return Err(SimError::InvalidConfig(format!(
            "delta_eps = {} must be non-negative and finite",
            spec.delta_eps
        )));
    }
    let mut out = train.clone();
    out.delta_eps = Some(spec.delta_eps);
    if spec.delta_eps == 0.0 {
        return Ok(out);
    }
    let stream = match leg {
        FluctuationLeg::Forward => Stream::FluctForward,
        FluctuationLeg::Echo => Stream::FluctEcho,
    };
    let key = rng::stream_key(spec.seed, stream);
    let cap = 6.0 * spec.delta_eps;
    for k in 0..train.n_steps as u64 {
        let (z1, z2) = rng::normal_pair(key, k);
        let d1 = (spec.delta_eps * z1).clamp(-cap, cap);
        let d2 = (spec.delta_eps * z2).clamp(-cap, cap);
        out.u1[k as usize] += d1;
        out.u2[k as usize] += d2;
    }
    Ok(out)
}

/// Time-reversed schedule: step order reversed, amplitudes negated, Kerr sign
/// flipped. Applying it twice returns the original train exactly.
pub fn echo_schedule(train: &PulseTrain) -> PulseTrain {
    let mut out = train.clone();
    out.u1 = train.u1.iter().rev().map(|&u| -u).collect();
    out.u2 = train.u2.iter().rev().map(|&u| -u).collect();
    out.kerr_sign = -train.kerr_sign;
    out
}
