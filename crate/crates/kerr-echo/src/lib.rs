//! Simulation library for time-reversal echo metrology on a driven Kerr
//! oscillator.
//!
//! The protocol: a random piecewise-constant drive scrambles the vacuum into
//! a non-Gaussian probe state, a phase `theta` is imprinted by the number
//! operator, and the time-reversed drive echoes the state back so that a
//! photon-number measurement near the vacuum reads the phase out with a
//! sensitivity that can beat the standard quantum limit. The crate covers the
//! full pipeline: truncated Fock-space primitives, pulse-train generation,
//! unitary and dissipative propagation, classical Fisher-information
//! analysis with bias-point optimization, ensemble statistics with power-law
//! fits, and Wigner-function snapshots. Everything is deterministic given the
//! configured seeds, independent of thread count.

pub mod chebyshev;
pub mod ensemble;
pub mod error;
pub mod fock;
pub mod io;
pub mod linalg;
pub mod metrology;
pub mod presets;
pub mod propagator;
pub mod protocol;
pub mod pulse;
pub mod rng;
pub mod wigner;

pub use error::{Result, SimError};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
