//! The full measurement sequence: a randomly drawn drive train prepares the
//! probe from vacuum, an unknown phase acts on the number basis, the
//! time-reversed train echoes the preparation, depolarizing noise acts once,
//! and a small POVM reads the result out.
//!
//! Probabilities are evaluated in the Heisenberg picture: each POVM element
//! is pulled back through the depolarizer and the echo channel once, and the
//! probe enters only through its matrix elements along fixed diagonals. The
//! phase `theta` then appears purely as `e^{-i m theta}` factors, so sweeping
//! `theta` costs O(d) per point and the derivative in `theta` is exact rather
//! than finite-differenced. [`run_protocol_direct`] keeps the plain
//! Schroedinger-picture route alive as an independent cross-check.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fock::{vacuum, DensityMatrix, FockDim, StateVector};
use crate::propagator::{
    adjoint_lindblad, evolve_lindblad_with, evolve_unitary_adjoint_with,
    evolve_unitary_channel_with, evolve_unitary_with, EvolveOptions, PropagationReport,
};
use crate::pulse::{
    echo_schedule, inject_fluctuations, sample_train, step_count, FluctuationLeg,
    FluctuationSpec, PulseKind, PulseTrain,
};
use crate::C64;

/// Readout basis size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PovmKind {
    /// `{|0><0|, rest}`.
    #[default]
    Binary,
    /// `{|0><0|, |1><1|, rest}`; only meaningful for pair drives, where the
    /// odd outcome witnesses parity leakage.
    Ternary,
}

/// Which passes of the sequence receive amplitude noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluctuationScope {
    /// Noise on the preparation only; the echo reverses the intended
    /// schedule, so the reversal is imperfect.
    Forward,
    /// Noise on the echo pass only; preparation runs the intended schedule.
    Echo,
    /// Noise lives in the played waveform and the echo reverses the waveform
    /// as played: the reversal stays exact and a fluctuated run is simply a
    /// run with a slightly different random train.
    #[default]
    Both,
}

/// Which passes of the sequence see photon loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Loss during preparation only; the echo pass runs clean.
    Forward,
    #[default]
    Both,
}

fn default_eps_dp() -> f64 {
    1e-3
}

/// One full experiment description. Serializes to flat JSON; the horizon is
/// stored as the dimensionless product `T` (Kerr rate times duration).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Fock-space truncation.
    pub d: usize,
    pub kind: PulseKind,
    /// Drive amplitude scale; each step draws uniformly from `[-epsilon, epsilon)`.
    pub epsilon: f64,
    /// Step duration.
    pub tau: f64,
    /// Total preparation time; must be an integer multiple of `tau`.
    #[serde(rename = "T")]
    pub chi_t: f64,
    /// Photon-loss rate (0 = closed system).
    #[serde(default)]
    pub kappa: f64,
    /// Depolarizing fraction applied once before readout.
    #[serde(default = "default_eps_dp")]
    pub eps_dp: f64,
    #[serde(default)]
    pub povm: PovmKind,
    /// Seed of the drive-train draw.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fluctuation: Option<FluctuationSpec>,
    #[serde(default)]
    pub fluctuation_scope: FluctuationScope,
    #[serde(default)]
    pub loss_scope: LossScope,
}

impl ProtocolConfig {
    /// Reject parameter combinations the protocol does not define.
    pub fn validate(&self) -> Result<()> {
        FockDim::new(self.d)?;
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(SimError::InvalidConfig(format!(
                "epsilon = {} must be non-negative and finite",
                self.epsilon
            )));
        }
        step_count(self.tau, self.chi_t)?;
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(SimError::InvalidConfig(format!(
                "kappa = {} must be non-negative and finite",
                self.kappa
            )));
        }
        if !(0.0..=1.0).contains(&self.eps_dp) {
            return Err(SimError::InvalidConfig(format!(
                "eps_dp = {} must lie in [0, 1]",
                self.eps_dp
            )));
        }
        if self.povm == PovmKind::Ternary && self.kind != PulseKind::TwoPhoton {
            return Err(SimError::InvalidConfig(
                "ternary readout requires the pair drive; the single-photon drive does not \
                 conserve parity"
                    .into(),
            ));
        }
        if let Some(spec) = &self.fluctuation {
            if !(spec.delta_eps >= 0.0) || !spec.delta_eps.is_finite() {
                return Err(SimError::InvalidConfig(format!(
                    "delta_eps = {} must be non-negative and finite",
                    spec.delta_eps
                )));
            }
        }
        Ok(())
    }

    fn dim(&self) -> Result<FockDim> {
        FockDim::new(self.d)
    }

    /// The two schedules a run executes. Under the default scope the echo is
    /// the time reversal of the train as played, noise included; the
    /// single-pass scopes fluctuate one pass against the intended schedule
    /// on the other, which is what makes the reversal imperfect.
    pub(crate) fn trains(&self) -> Result<(PulseTrain, PulseTrain)> {
        let clean = sample_train(self.kind, self.epsilon, self.tau, self.chi_t, self.seed)?;
        let Some(spec) = &self.fluctuation else {
            let echo = echo_schedule(&clean);
            return Ok((clean, echo));
        };
        match self.fluctuation_scope {
            FluctuationScope::Both => {
                let fwd = inject_fluctuations(&clean, spec, FluctuationLeg::Forward)?;
                let echo = echo_schedule(&fwd);
                Ok((fwd, echo))
            }
            FluctuationScope::Forward => {
                let fwd = inject_fluctuations(&clean, spec, FluctuationLeg::Forward)?;
                Ok((fwd, echo_schedule(&clean)))
            }
            FluctuationScope::Echo => {
                let echo = inject_fluctuations(&echo_schedule(&clean), spec, FluctuationLeg::Echo)?;
                Ok((clean, echo))
            }
        }
    }
}

/// Positive readout elements summing to the identity.
pub struct PovmSet {
    dim: FockDim,
    elements: Vec<Array2<C64>>,
}

impl PovmSet {
    pub fn new(dim: FockDim, kind: PovmKind) -> PovmSet {
        let d = dim.get();
        let explicit: &[usize] = match kind {
            PovmKind::Binary => &[0],
            PovmKind::Ternary => &[0, 1],
        };
        let mut elements = Vec::with_capacity(explicit.len() + 1);
        let mut rest = Array2::<C64>::eye(d);
        for &b in explicit {
            let mut m = Array2::<C64>::zeros((d, d));
            m[[b, b]] = C64::new(1.0, 0.0);
            rest[[b, b]] = C64::new(0.0, 0.0);
            elements.push(m);
        }
        elements.push(rest);
        PovmSet { dim, elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[Array2<C64>] {
        &self.elements
    }

    /// Completeness (sum = identity within 1e-12) and positivity of every
    /// element.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim.get();
        let mut sum = Array2::<C64>::zeros((d, d));
        for m in &self.elements {
            sum += m;
        }
        let eye = Array2::<C64>::eye(d);
        let defect = crate::linalg::max_abs_diff(&sum, &eye);
        if defect > 1e-12 {
            return Err(SimError::InvalidConfig(format!(
                "readout elements miss completeness by {defect:.2e}"
            )));
        }
        for (i, m) in self.elements.iter().enumerate() {
            let lowest = crate::linalg::eigvalsh(m)?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            if lowest < -1e-10 {
                return Err(SimError::InvalidConfig(format!(
                    "readout element {i} has negative eigenvalue {lowest:.2e}"
                )));
            }
        }
        Ok(())
    }
}

/// `tr(M_n rho)` for every element.
pub fn measure(povm: &PovmSet, rho: &DensityMatrix) -> Result<Vec<f64>> {
    let d = rho.dim().get();
    let mut probs = Vec::with_capacity(povm.len());
    for m in povm.elements() {
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..d {
            for k in 0..d {
                acc += m[[j, k]] * rho.matrix()[[k, j]];
            }
        }
        if acc.im.abs() > 1e-9 {
            return Err(SimError::NonHermitianResult {
                context: "readout probability".into(),
                residue: acc.im.abs(),
            });
        }
        probs.push(acc.re);
    }
    Ok(probs)
}

/// `(1 - eps) rho + eps I/d`.
pub fn depolarize(rho: &DensityMatrix, eps_dp: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&eps_dp) {
        return Err(SimError::InvalidConfig(format!(
            "eps_dp = {eps_dp} must lie in [0, 1]"
        )));
    }
    if eps_dp == 0.0 {
        return Ok(rho.clone());
    }
    Ok(rho.mix(&DensityMatrix::maximally_mixed(rho.dim()), eps_dp))
}

/// Everything [`run_protocol`] reports for one `theta`.
#[derive(Clone, Debug, Serialize)]
pub struct ProtocolOutcome {
    /// Outcome probabilities, in POVM element order.
    pub probs: Vec<f64>,
    /// Exact derivatives of `probs` in `theta`.
    pub dprobs: Vec<f64>,
    /// Mean photon number of the prepared probe.
    pub n_mean_probe: f64,
    /// Photon-number variance of the prepared probe.
    pub n_var_probe: f64,
    /// Accuracy bookkeeping accumulated over the forward and echo passes.
    pub report: PropagationReport,
}

enum Probe {
    Pure(StateVector),
    Mixed(DensityMatrix),
}

fn basis_state(dim: FockDim, n: usize) -> Result<StateVector> {
    let mut amp = vec![C64::new(0.0, 0.0); dim.get()];
    if n >= amp.len() {
        return Err(SimError::InvalidConfig(format!(
            "level {n} outside dimension {}",
            amp.len()
        )));
    }
    amp[n] = C64::new(1.0, 0.0);
    StateVector::new(dim, amp)
}

fn absorb(report: &mut PropagationReport, leg: &PropagationReport) {
    report.final_tail_population = report.final_tail_population.max(leg.final_tail_population);
    report.norm_defect = report.norm_defect.max(leg.norm_defect);
    report.substeps_used += leg.substeps_used;
}

/// Offset sums `t_m = sum_j M[j, j+m] rho[j+m, j]` for a pure probe and a
/// pulled-back projector `(1-eps) |w><w| + (eps/d) I`.
fn offset_sums_pure(w: &Array1<C64>, psi: &Array1<C64>, eps_dp: f64) -> Vec<C64> {
    let d = w.len();
    let a: Vec<C64> = (0..d).map(|j| w[j].conj() * psi[j]).collect();
    let mut t = vec![C64::new(0.0, 0.0); d];
    for (m, tm) in t.iter_mut().enumerate() {
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..d - m {
            acc += a[j].conj() * a[j + m];
        }
        *tm = acc * (1.0 - eps_dp);
    }
    t[0] += C64::new(eps_dp / d as f64, 0.0);
    t
}

/// Offset sums against a dense pulled-back element.
fn offset_sums_dense(mtilde: &Array2<C64>, rho: &Array2<C64>) -> Vec<C64> {
    let d = mtilde.nrows();
    let mut t = vec![C64::new(0.0, 0.0); d];
    for (m, tm) in t.iter_mut().enumerate() {
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..d - m {
            acc += mtilde[[j, j + m]] * rho[[j + m, j]];
        }
        *tm = acc;
    }
    t
}

/// A protocol instance with the probe prepared and every readout element
/// pulled back through the noise and the echo, ready to be evaluated at any
/// phase in O(d).
pub struct ProtocolEvaluator {
    n_outcomes: usize,
    /// Per explicit outcome, the diagonal sums `t_m`; the final outcome comes
    /// from completeness.
    offsets: Vec<Vec<C64>>,
    n_mean: f64,
    n_var: f64,
    report: PropagationReport,
}

impl ProtocolEvaluator {
    pub fn new(config: &ProtocolConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.dim()?;
        let d = dim.get();
        let (fwd, echo) = config.trains()?;
        let opts = EvolveOptions::default();
        let mut report = PropagationReport::default();

        let probe = if config.kappa == 0.0 {
            let (psi, leg) = evolve_unitary_with(&vacuum(dim), &fwd, &opts)?;
            absorb(&mut report, &leg);
            Probe::Pure(psi)
        } else {
            let (rho, leg) =
                evolve_lindblad_with(&DensityMatrix::vacuum(dim), &fwd, config.kappa, &opts)?;
            absorb(&mut report, &leg);
            Probe::Mixed(rho)
        };
        let (n_mean, n_var) = match &probe {
            Probe::Pure(psi) => psi.number_moments(),
            Probe::Mixed(rho) => rho.number_moments(),
        };

        let explicit: &[usize] = match config.povm {
            PovmKind::Binary => &[0],
            PovmKind::Ternary => &[0, 1],
        };
        let echo_is_unitary = config.kappa == 0.0 || config.loss_scope == LossScope::Forward;
        let mut offsets = Vec::with_capacity(explicit.len());
        for &b in explicit {
            let t = if echo_is_unitary {
                let (w, leg) = evolve_unitary_adjoint_with(&basis_state(dim, b)?, &echo, &opts)?;
                absorb(&mut report, &leg);
                match &probe {
                    Probe::Pure(psi) => {
                        offset_sums_pure(w.amplitudes(), psi.amplitudes(), config.eps_dp)
                    }
                    Probe::Mixed(rho) => {
                        // materialize (1-eps)|w><w| + (eps/d) I once
                        let wa = w.amplitudes();
                        let scale = 1.0 - config.eps_dp;
                        let mut m = Array2::<C64>::zeros((d, d));
                        for j in 0..d {
                            for k in 0..d {
                                m[[j, k]] = scale * wa[j] * wa[k].conj();
                            }
                            m[[j, j]] += C64::new(config.eps_dp / d as f64, 0.0);
                        }
                        offset_sums_dense(&m, rho.matrix())
                    }
                }
            } else {
                let rho = match &probe {
                    Probe::Mixed(rho) => rho,
                    Probe::Pure(_) => unreachable!("lossy echo implies a lossy forward pass"),
                };
                let mut m = Array2::<C64>::zeros((d, d));
                m[[b, b]] = C64::new(1.0 - config.eps_dp, 0.0);
                for j in 0..d {
                    m[[j, j]] += C64::new(config.eps_dp / d as f64, 0.0);
                }
                let (mt, leg) = adjoint_lindblad(&m, dim, &echo, config.kappa, &opts)?;
                absorb(&mut report, &leg);
                offset_sums_dense(&mt, rho.matrix())
            };
            offsets.push(t);
        }

        Ok(ProtocolEvaluator {
            n_outcomes: explicit.len() + 1,
            offsets,
            n_mean,
            n_var,
            report,
        })
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn n_mean(&self) -> f64 {
        self.n_mean
    }

    pub fn n_var(&self) -> f64 {
        self.n_var
    }

    pub fn report(&self) -> PropagationReport {
        self.report
    }

    /// Probabilities and their exact `theta`-derivatives. The last outcome is
    /// completed from the others; the pulled-back elements sum to the
    /// identity, so its error is bounded by theirs.
    pub fn probabilities(&self, theta: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_outcomes;
        let mut probs = vec![0.0; n];
        let mut dprobs = vec![0.0; n];
        let z = C64::from_polar(1.0, -theta);
        for (i, t) in self.offsets.iter().enumerate() {
            let mut zm = C64::new(1.0, 0.0);
            let mut p = t[0].re;
            let mut dp = 0.0;
            for (m, tm) in t.iter().enumerate().skip(1) {
                zm *= z;
                let v = tm * zm;
                p += 2.0 * v.re;
                dp += 2.0 * m as f64 * v.im;
            }
            probs[i] = p;
            dprobs[i] = dp;
        }
        probs[n - 1] = 1.0 - probs[..n - 1].iter().sum::<f64>();
        dprobs[n - 1] = -dprobs[..n - 1].iter().sum::<f64>();
        (probs, dprobs)
    }

    /// [`probabilities`](Self::probabilities) plus probe bookkeeping, with
    /// negative rounding residue cleared.
    pub fn outcome(&self, theta: f64) -> Result<ProtocolOutcome> {
        let (mut probs, dprobs) = self.probabilities(theta);
        for p in &mut probs {
            if *p < 0.0 {
                if *p < -1e-9 {
                    return Err(SimError::ConvergenceFailure {
                        context: "negative outcome probability".into(),
                        residual: -*p,
                        tolerance: 1e-9,
                    });
                }
                *p = 0.0;
            }
        }
        Ok(ProtocolOutcome {
            probs,
            dprobs,
            n_mean_probe: self.n_mean,
            n_var_probe: self.n_var,
            report: self.report,
        })
    }
}

/// Run the full sequence at phase `theta`.
pub fn run_protocol(config: &ProtocolConfig, theta: f64) -> Result<ProtocolOutcome> {
    ProtocolEvaluator::new(config)?.outcome(theta)
}

/// Exact outcome derivatives at the operating point `theta0`.
pub fn derivative_probabilities(config: &ProtocolConfig, theta0: f64) -> Result<Vec<f64>> {
    Ok(ProtocolEvaluator::new(config)?.probabilities(theta0).1)
}

/// The prepared probe as a density matrix, before phase encoding.
pub fn prepare_probe(config: &ProtocolConfig) -> Result<(DensityMatrix, PropagationReport)> {
    config.validate()?;
    let dim = config.dim()?;
    let (fwd, _) = config.trains()?;
    let opts = EvolveOptions::default();
    if config.kappa == 0.0 {
        let (psi, report) = evolve_unitary_with(&vacuum(dim), &fwd, &opts)?;
        Ok((psi.to_density(), report))
    } else {
        evolve_lindblad_with(&DensityMatrix::vacuum(dim), &fwd, config.kappa, &opts)
    }
}

/// Phase-encode `rho`, apply the echo pass and the depolarizer, and read out.
/// Density-matrix route throughout; used as the reference the Heisenberg
/// evaluation is checked against, and linear in `rho` by construction.
pub fn echo_and_measure(
    config: &ProtocolConfig,
    rho: &DensityMatrix,
    theta: f64,
) -> Result<Vec<f64>> {
    config.validate()?;
    let dim = config.dim()?;
    let (_, echo) = config.trains()?;
    let opts = EvolveOptions::default();
    let rotated = rho.phase_rotated(theta);
    let echoed = if config.kappa > 0.0 && config.loss_scope == LossScope::Both {
        evolve_lindblad_with(&rotated, &echo, config.kappa, &opts)?.0
    } else {
        evolve_unitary_channel_with(&rotated, &echo, &opts)?.0
    };
    let noisy = depolarize(&echoed, config.eps_dp)?;
    measure(&PovmSet::new(dim, config.povm), &noisy)
}

/// Schroedinger-picture reference for [`run_protocol`]: densities all the
/// way, per-segment eigensolver exponentials, every element measured
/// directly. Slow; for cross-checks at small `d`.
pub fn run_protocol_direct(config: &ProtocolConfig, theta: f64) -> Result<Vec<f64>> {
    config.validate()?;
    let (fwd, _) = config.trains()?;
    let dim = config.dim()?;
    let opts = EvolveOptions::default();
    let rho = if config.kappa == 0.0 {
        evolve_unitary_channel_with(&DensityMatrix::vacuum(dim), &fwd, &opts)?.0
    } else {
        evolve_lindblad_with(&DensityMatrix::vacuum(dim), &fwd, config.kappa, &opts)?.0
    };
    echo_and_measure(config, &rho, theta)
}
