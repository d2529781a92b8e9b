//! Error types shared across the simulation pipeline.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SimError>;

/// Failure modes of the simulation pipeline.
///
/// Numerical guards (`TruncationOverflow`, `ConvergenceFailure`) abort a
/// realization rather than silently returning data computed outside the
/// validated regime; ensemble drivers record and exclude such realizations.
#[derive(Debug, Error)]
pub enum SimError {
    /// Population reached the top of the truncated Fock space, or an operator
    /// construction lost unitarity to truncation.
    #[error("truncation overflow: {context} (defect {defect:.3e}, limit {limit:.3e})")]
    TruncationOverflow {
        context: String,
        defect: f64,
        limit: f64,
    },

    /// An iterative scheme failed its convergence gate at the maximum
    /// admissible refinement.
    #[error("convergence failure: {context} (residual {residual:.3e}, tolerance {tolerance:.3e})")]
    ConvergenceFailure {
        context: String,
        residual: f64,
        tolerance: f64,
    },

    /// Total time is not an integer multiple of the pulse step.
    #[error("bad horizon: T/tau = {ratio} deviates from integer by more than {tolerance:.1e}")]
    BadHorizon { ratio: f64, tolerance: f64 },

    /// An expectation value that must be real carried a significant imaginary
    /// part, or the operator itself was not Hermitian.
    #[error("non-Hermitian result: {context} (imaginary residue {residue:.3e})")]
    NonHermitianResult { context: String, residue: f64 },

    /// A probability below the floor carried non-negligible sensitivity, so
    /// excluding it would corrupt the Fisher information.
    #[error(
        "degenerate distribution: outcome {outcome} has p = {prob:.3e} below floor \
         but |dp/dtheta| = {slope:.3e}"
    )]
    DegenerateDistribution {
        outcome: usize,
        prob: f64,
        slope: f64,
    },

    /// Metrological gain is undefined for a probe with no photons.
    #[error("zero-photon probe: n_mean = {n_mean:.3e}")]
    ZeroPhotonProbe { n_mean: f64 },

    /// The pure-state Fisher-information formula was applied to a mixed state.
    #[error("mixed state input: purity = {purity} is below {threshold}")]
    MixedStateInput { purity: f64, threshold: f64 },

    /// Not enough data points for the requested fit.
    #[error("insufficient points: {context} (got {got}, need {need})")]
    InsufficientPoints {
        context: String,
        got: usize,
        need: usize,
    },

    /// Log-log fitting requires strictly positive data.
    #[error("non-positive data: {context} (value {value:.3e} at index {index})")]
    NonPositiveData {
        context: String,
        index: usize,
        value: f64,
    },

    /// Every realization of an ensemble failed its guards.
    #[error("all {attempted} realizations failed; first error: {first_error}")]
    AllRealizationsFailed {
        attempted: usize,
        first_error: String,
    },

    /// Structurally invalid configuration or arguments.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl SimError {
    /// Stable machine-readable discriminant, used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            SimError::TruncationOverflow { .. } => "TruncationOverflow",
            SimError::ConvergenceFailure { .. } => "ConvergenceFailure",
            SimError::BadHorizon { .. } => "BadHorizon",
            SimError::NonHermitianResult { .. } => "NonHermitianResult",
            SimError::DegenerateDistribution { .. } => "DegenerateDistribution",
            SimError::ZeroPhotonProbe { .. } => "ZeroPhotonProbe",
            SimError::MixedStateInput { .. } => "MixedStateInput",
            SimError::InsufficientPoints { .. } => "InsufficientPoints",
            SimError::NonPositiveData { .. } => "NonPositiveData",
            SimError::AllRealizationsFailed { .. } => "AllRealizationsFailed",
            SimError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}
