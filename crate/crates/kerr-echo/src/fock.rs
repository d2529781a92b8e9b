//! Truncated Fock-space primitives: states, density matrices, and the
//! operator set the protocol is built from.
//!
//! Everything is stored dense over `d` number levels. Truncation artifacts
//! are surfaced, not hidden: the displacement constructor measures its own
//! unitarity defect, and propagation routines (in [`crate::propagator`])
//! watch the population of the top levels.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::C64;

/// Hilbert-space truncation, `d >= 2` number levels `|0> .. |d-1>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FockDim(usize);

impl FockDim {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(SimError::InvalidConfig(format!("Fock dimension {d} < 2")));
        }
        Ok(FockDim(d))
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0
    }
}

/// Levels making up the truncation tail watched by the overflow guard: the
/// top 5% of the space, but never fewer than 3 levels.
pub fn tail_start(dim: FockDim) -> usize {
    let d = dim.get();
    let tail = (d as f64 * 0.05).ceil() as usize;
    d - tail.max(3).min(d)
}

/// Reduce a rotation angle to `[0, 2*pi)`. Number phases `exp(-i theta n)`
/// are 2*pi-periodic for integer `n`, so this is exact and makes
/// `theta = 2*pi` map to the identity with no rounding residue.
fn reduce_angle(theta: f64) -> f64 {
    theta.rem_euclid(std::f64::consts::TAU)
}

// ── States ───────────────────────────────────────────────────────────────

/// Pure state over the truncated space.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub(crate) dim: FockDim,
    pub(crate) amp: Array1<C64>,
}

impl StateVector {
    pub fn new(dim: FockDim, amplitudes: Vec<C64>) -> Result<Self> {
        if amplitudes.len() != dim.get() {
            return Err(SimError::InvalidConfig(format!(
                "state length {} does not match dimension {}",
                amplitudes.len(),
                dim.get()
            )));
        }
        Ok(StateVector { dim, amp: Array1::from_vec(amplitudes) })
    }

    pub fn dim(&self) -> FockDim {
        self.dim
    }

    pub fn amplitudes(&self) -> &Array1<C64> {
        &self.amp
    }

    pub fn norm(&self) -> f64 {
        self.amp.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `|<self|other>|` overlap magnitude.
    pub fn overlap(&self, other: &StateVector) -> f64 {
        self.amp
            .iter()
            .zip(other.amp.iter())
            .map(|(a, b)| a.conj() * b)
            .sum::<C64>()
            .norm()
    }

    /// Level populations `|psi_n|^2`.
    pub fn populations(&self) -> Vec<f64> {
        self.amp.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Population in the truncation tail.
    pub fn tail_population(&self) -> f64 {
        let start = tail_start(self.dim);
        self.amp.iter().skip(start).map(|a| a.norm_sqr()).sum()
    }

    /// Mean and variance of the photon number.
    pub fn number_moments(&self) -> (f64, f64) {
        moments_from_populations(self.populations().iter().copied())
    }

    /// Apply `exp(-i theta n)` elementwise.
    pub fn phase_rotated(&self, theta: f64) -> StateVector {
        let th = reduce_angle(theta);
        let amp = Array1::from_iter(
            self.amp
                .iter()
                .enumerate()
                .map(|(n, a)| a * C64::from_polar(1.0, -th * n as f64)),
        );
        StateVector { dim: self.dim, amp }
    }

    pub fn to_density(&self) -> DensityMatrix {
        let d = self.dim.get();
        let mut mat = Array2::zeros((d, d));
        for j in 0..d {
            for k in 0..d {
                mat[[j, k]] = self.amp[j] * self.amp[k].conj();
            }
        }
        DensityMatrix { dim: self.dim, mat }
    }
}

fn moments_from_populations(pops: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut norm = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (n, p) in pops.enumerate() {
        let x = n as f64;
        norm += p;
        m1 += x * p;
        m2 += x * x * p;
    }
    if norm <= 0.0 {
        return (0.0, 0.0);
    }
    let mean = m1 / norm;
    (mean, (m2 / norm - mean * mean).max(0.0))
}

/// The vacuum `|0>`.
pub fn vacuum(dim: FockDim) -> StateVector {
    let mut amp = Array1::zeros(dim.get());
    amp[0] = C64::new(1.0, 0.0);
    StateVector { dim, amp }
}

// ── Density matrices ─────────────────────────────────────────────────────

/// Mixed state over the truncated space. Constructors produce valid states;
/// propagation keeps trace and Hermiticity defects within documented bounds
/// rather than silently renormalizing.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    pub(crate) dim: FockDim,
    pub(crate) mat: Array2<C64>,
}

impl DensityMatrix {
    pub fn from_matrix(dim: FockDim, mat: Array2<C64>) -> Result<Self> {
        if mat.nrows() != dim.get() || mat.ncols() != dim.get() {
            return Err(SimError::InvalidConfig(format!(
                "matrix shape {:?} does not match dimension {}",
                mat.shape(),
                dim.get()
            )));
        }
        Ok(DensityMatrix { dim, mat })
    }

    pub fn from_pure(state: &StateVector) -> DensityMatrix {
        state.to_density()
    }

    pub fn vacuum(dim: FockDim) -> DensityMatrix {
        vacuum(dim).to_density()
    }

    /// `|n><n|` projector.
    pub fn number_projector(dim: FockDim, n: usize) -> Result<DensityMatrix> {
        if n >= dim.get() {
            return Err(SimError::InvalidConfig(format!(
                "level {n} outside dimension {}",
                dim.get()
            )));
        }
        let mut mat = Array2::zeros((dim.get(), dim.get()));
        mat[[n, n]] = C64::new(1.0, 0.0);
        Ok(DensityMatrix { dim, mat })
    }

    pub fn maximally_mixed(dim: FockDim) -> DensityMatrix {
        let d = dim.get();
        let mut mat = Array2::zeros((d, d));
        let p = C64::new(1.0 / d as f64, 0.0);
        for j in 0..d {
            mat[[j, j]] = p;
        }
        DensityMatrix { dim, mat }
    }

    pub fn dim(&self) -> FockDim {
        self.dim
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.mat
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim.get()).map(|j| self.mat[[j, j]]).sum()
    }

    /// Largest elementwise deviation from `rho = rho^dagger`.
    pub fn hermiticity_defect(&self) -> f64 {
        let d = self.dim.get();
        let mut worst = 0.0f64;
        for j in 0..d {
            for k in j..d {
                let diff = (self.mat[[j, k]] - self.mat[[k, j]].conj()).norm();
                worst = worst.max(diff);
            }
        }
        worst
    }

    /// `tr(rho^2)`, computed elementwise (no matrix product needed for a
    /// Hermitian argument).
    pub fn purity(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Diagonal populations (real parts).
    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim.get()).map(|j| self.mat[[j, j]].re).collect()
    }

    pub fn tail_population(&self) -> f64 {
        let start = tail_start(self.dim);
        (start..self.dim.get()).map(|j| self.mat[[j, j]].re).sum()
    }

    /// Mean and variance of the photon number.
    pub fn number_moments(&self) -> (f64, f64) {
        moments_from_populations(self.populations().into_iter())
    }

    /// Conjugate by `exp(-i theta n)`: `rho_jk -> e^{-i theta (j-k)} rho_jk`.
    pub fn phase_rotated(&self, theta: f64) -> DensityMatrix {
        let th = reduce_angle(theta);
        let d = self.dim.get();
        let phases: Vec<C64> =
            (0..d).map(|n| C64::from_polar(1.0, -th * n as f64)).collect();
        let mut mat = self.mat.clone();
        for j in 0..d {
            for k in 0..d {
                mat[[j, k]] *= phases[j] * phases[k].conj();
            }
        }
        DensityMatrix { dim: self.dim, mat }
    }

    /// Convex combination `(1-w) self + w other`.
    pub fn mix(&self, other: &DensityMatrix, w: f64) -> DensityMatrix {
        let mat = self.mat.mapv(|z| z * (1.0 - w)) + other.mat.mapv(|z| z * w);
        DensityMatrix { dim: self.dim, mat }
    }
}

// ── Operators ────────────────────────────────────────────────────────────

/// What an operator matrix represents; `Custom` marks matrices assembled by
/// callers, which get a structural Hermiticity check in [`expectation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorTag {
    Annihilation,
    Number,
    NumberSq,
    Parity,
    Displacement,
    PhaseRotation,
    Custom,
}

/// Dense operator on the truncated space.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    pub(crate) dim: FockDim,
    pub(crate) tag: OperatorTag,
    pub(crate) mat: Array2<C64>,
}

impl Operator {
    pub fn custom(dim: FockDim, mat: Array2<C64>) -> Result<Self> {
        if mat.nrows() != dim.get() || mat.ncols() != dim.get() {
            return Err(SimError::InvalidConfig(format!(
                "operator shape {:?} does not match dimension {}",
                mat.shape(),
                dim.get()
            )));
        }
        Ok(Operator { dim, tag: OperatorTag::Custom, mat })
    }

    pub fn dim(&self) -> FockDim {
        self.dim
    }

    pub fn tag(&self) -> OperatorTag {
        self.tag
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.mat
    }

    /// `A |psi>`.
    pub fn apply(&self, state: &StateVector) -> Result<StateVector> {
        if state.dim != self.dim {
            return Err(SimError::InvalidConfig("operator/state dimension mismatch".into()));
        }
        Ok(StateVector { dim: self.dim, amp: self.mat.dot(&state.amp) })
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let d = self.dim.get();
        let mut worst = 0.0f64;
        for j in 0..d {
            for k in j..d {
                worst = worst.max((self.mat[[j, k]] - self.mat[[k, j]].conj()).norm());
            }
        }
        worst
    }
}

/// Lowering operator: `<n-1| a |n> = sqrt(n)`.
pub fn annihilation(dim: FockDim) -> Operator {
    let d = dim.get();
    let mut mat = Array2::zeros((d, d));
    for n in 1..d {
        mat[[n - 1, n]] = C64::new((n as f64).sqrt(), 0.0);
    }
    Operator { dim, tag: OperatorTag::Annihilation, mat }
}

/// `(n, n^2)` as diagonal operators.
pub fn number_ops(dim: FockDim) -> (Operator, Operator) {
    let d = dim.get();
    let mut n_mat = Array2::zeros((d, d));
    let mut nsq_mat = Array2::zeros((d, d));
    for n in 0..d {
        let x = n as f64;
        n_mat[[n, n]] = C64::new(x, 0.0);
        nsq_mat[[n, n]] = C64::new(x * x, 0.0);
    }
    (
        Operator { dim, tag: OperatorTag::Number, mat: n_mat },
        Operator { dim, tag: OperatorTag::NumberSq, mat: nsq_mat },
    )
}

/// Photon-number parity `(-1)^n`.
pub fn parity(dim: FockDim) -> Operator {
    let d = dim.get();
    let mut mat = Array2::zeros((d, d));
    for n in 0..d {
        mat[[n, n]] = C64::new(if n % 2 == 0 { 1.0 } else { -1.0 }, 0.0);
    }
    Operator { dim, tag: OperatorTag::Parity, mat }
}

/// `exp(-i theta n)` as a diagonal operator (angle reduced mod 2*pi).
pub fn phase_rotation(dim: FockDim, theta: f64) -> Operator {
    let th = reduce_angle(theta);
    let d = dim.get();
    let mut mat = Array2::zeros((d, d));
    for n in 0..d {
        mat[[n, n]] = C64::from_polar(1.0, -th * n as f64);
    }
    Operator { dim, tag: OperatorTag::PhaseRotation, mat }
}

/// Truncation defect a displacement may carry before it is rejected.
pub const DISPLACEMENT_DEFECT_LIMIT: f64 = 1e-6;

/// Displacement operator `D(alpha) = exp(alpha a^dagger - alpha* a)`, built
/// by exponentiating the dense generator on the truncated space (through the
/// Hermitian eigensolver), so the result is unitary on that space to
/// machine precision for every `alpha`.
///
/// What can go wrong is faithfulness, not unitarity: once `|alpha|^2` is
/// comparable to `d`, the displaced vacuum reflects off the truncation
/// boundary instead of matching the true coherent state. The guard measures
/// exactly that, as the l2 distance between `D|0>` and the closed-form
/// coherent amplitudes (tail mass beyond level `d-1` included), and rejects
/// the operator above [`DISPLACEMENT_DEFECT_LIMIT`]. `|alpha|^2 <= d/10`
/// keeps the defect at rounding level.
pub fn displacement(dim: FockDim, alpha: C64) -> Result<Operator> {
    let d = dim.get();
    // exp(G) with G = alpha adag - alpha* a, via exp(-i H), H = iG Hermitian.
    let i_unit = C64::new(0.0, 1.0);
    let mut h = Array2::<C64>::zeros((d, d));
    for n in 1..d {
        let s = (n as f64).sqrt();
        h[[n, n - 1]] = i_unit * (alpha * s);
        h[[n - 1, n]] = i_unit * (-alpha.conj() * s);
    }
    let mat = crate::linalg::eigh(&h)?.evolution(1.0);

    let x = alpha.norm_sqr();
    let r = alpha.norm();
    let phase = if r > 0.0 { alpha / r } else { C64::new(1.0, 0.0) };
    let mut dev_sq = 0.0f64;
    let mut in_space = 0.0f64;
    let mut coh = (-x / 2.0).exp();
    let mut ph = C64::new(1.0, 0.0);
    for m in 0..d {
        if m > 0 {
            coh *= r / (m as f64).sqrt();
            ph *= phase;
        }
        dev_sq += (mat[[m, 0]] - ph * coh).norm_sqr();
        in_space += coh * coh;
    }
    let defect = (dev_sq + (1.0 - in_space).max(0.0)).sqrt();
    if defect > DISPLACEMENT_DEFECT_LIMIT {
        return Err(SimError::TruncationOverflow {
            context: format!("displacement(alpha = {alpha}) at d = {d}"),
            defect,
            limit: DISPLACEMENT_DEFECT_LIMIT,
        });
    }
    Ok(Operator { dim, tag: OperatorTag::Displacement, mat })
}

/// Closed-form displacement matrix without the unitarity gate. The Wigner
/// sampler uses this directly and applies its own truncation guard, weighted
/// by the state it is tracing against (see `crate::wigner`).
pub(crate) fn displacement_matrix(dim: FockDim, alpha: C64) -> Array2<C64> {
    let d = dim.get();
    let mut mat: Array2<C64> = Array2::zeros((d, d));
    let x = alpha.norm_sqr();
    if x == 0.0 {
        for n in 0..d {
            mat[[n, n]] = C64::new(1.0, 0.0);
        }
        return mat;
    }
    let r = alpha.norm();
    let phase = alpha / r; // e^{i arg alpha}
    // Magnitude-normalized elements for offset k = m - n >= 0:
    //   R_n(k) = sqrt(n!/(n+k)!) r^k e^{-x/2} L_n^{(k)}(x),
    // so that  <n+k| D |n> = R_n(k) phase^k  and
    //          <n| D |n+k> = R_n(k) (-conj(phase))^k.
    // Three-term recurrence in n with O(1) coefficients; |R| <= 1 throughout
    // because these are matrix elements of a unitary.
    let mut r0_head = (-x / 2.0).exp(); // R_0(k) seed, updated as r^k/sqrt(k!) grows
    let mut phase_up = C64::new(1.0, 0.0); // phase^k
    let mut phase_dn = C64::new(1.0, 0.0); // (-conj(phase))^k
    for k in 0..d {
        if k > 0 {
            r0_head *= r / (k as f64).sqrt();
            phase_up *= phase;
            phase_dn *= -phase.conj();
        }
        let kk = k as f64;
        let mut prev = 0.0f64;
        let mut cur = r0_head;
        for n in 0..d - k {
            if n > 0 {
                let nn = n as f64;
                let next = ((2.0 * nn - 1.0 + kk - x) * cur
                    - ((nn - 1.0) * (nn - 1.0 + kk)).sqrt() * prev)
                    / (nn * (nn + kk)).sqrt();
                prev = cur;
                cur = next;
            }
            mat[[n + k, n]] = phase_up * cur;
            if k > 0 {
                mat[[n, n + k]] = phase_dn * cur;
            }
        }
    }
    mat
}

/// Real expectation value `Re tr(op rho)`.
///
/// Rejects results whose imaginary residue exceeds `1e-9 (1 + |Re|)`, and
/// rejects `Custom`-tagged operators that are not structurally Hermitian
/// (built-in non-Hermitian tags like `Annihilation` are only subject to the
/// residue check, so their real-valued expectations remain usable).
pub fn expectation(op: &Operator, rho: &DensityMatrix) -> Result<f64> {
    if op.dim != rho.dim {
        return Err(SimError::InvalidConfig("operator/state dimension mismatch".into()));
    }
    if op.tag == OperatorTag::Custom {
        let scale = op.mat.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        let defect = op.hermiticity_defect();
        if defect > 1e-12 * (1.0 + scale) {
            return Err(SimError::NonHermitianResult {
                context: "custom operator is not Hermitian".into(),
                residue: defect,
            });
        }
    }
    let d = op.dim.get();
    let mut tr = C64::new(0.0, 0.0);
    for j in 0..d {
        for k in 0..d {
            tr += op.mat[[j, k]] * rho.mat[[k, j]];
        }
    }
    if tr.im.abs() > 1e-9 * (1.0 + tr.re.abs()) {
        return Err(SimError::NonHermitianResult {
            context: "expectation value carries imaginary part".into(),
            residue: tr.im.abs(),
        });
    }
    Ok(tr.re)
}
