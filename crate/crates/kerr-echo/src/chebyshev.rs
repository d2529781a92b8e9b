//! Exponential action `exp(-i tau H) psi` for banded Hermitian matrices via
//! a Chebyshev expansion with Bessel coefficients.
//!
//! Segments of a pulse train are constant in time, so propagating a pure
//! state needs nothing but the exponential of a (number-diagonal + one
//! off-diagonal band) matrix applied to a vector. The Chebyshev series
//!
//! `exp(-i tau H) = e^{-i c tau} [ J_0(x) + 2 sum_k (-i)^k J_k(x) T_k(Hs) ]`
//!
//! with `Hs = (H - c I)/w` scaled by Gershgorin bounds and `x = w tau`
//! converges superexponentially once `k` passes `|x|`, and every term is one
//! banded matrix-vector product, so the cost is `O(d)` per term with no
//! dense matrix ever built.

use ndarray::Array1;

use crate::error::{Result, SimError};
use crate::C64;

/// Hermitian matrix with a real diagonal and one lower band at `offset`
/// (`band[n] = H[n + offset, n]`); the upper band is implied.
#[derive(Clone, Debug)]
pub struct BandedHermitian {
    pub diag: Vec<f64>,
    pub offset: usize,
    pub band: Vec<C64>,
}

impl BandedHermitian {
    pub fn new(diag: Vec<f64>, offset: usize, band: Vec<C64>) -> Result<Self> {
        let d = diag.len();
        if offset == 0 || offset >= d || band.len() != d - offset {
            return Err(SimError::InvalidConfig(format!(
                "banded matrix shape mismatch: d = {d}, offset = {offset}, band = {}",
                band.len()
            )));
        }
        Ok(BandedHermitian { diag, offset, band })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `y = H x`.
    pub fn matvec(&self, x: &[C64], y: &mut [C64]) {
        let d = self.diag.len();
        for n in 0..d {
            y[n] = self.diag[n] * x[n];
        }
        let off = self.offset;
        for k in 0..d - off {
            let b = self.band[k];
            y[k + off] += b * x[k];
            y[k] += b.conj() * x[k + off];
        }
    }

    /// Gershgorin enclosure `[emin, emax]` of the spectrum.
    pub fn gershgorin(&self) -> (f64, f64) {
        let d = self.diag.len();
        let off = self.offset;
        let mut emin = f64::INFINITY;
        let mut emax = f64::NEG_INFINITY;
        for n in 0..d {
            let mut r = 0.0;
            if n >= off {
                r += self.band[n - off].norm();
            }
            if n + off < d {
                r += self.band[n].norm();
            }
            emin = emin.min(self.diag[n] - r);
            emax = emax.max(self.diag[n] + r);
        }
        (emin, emax)
    }

    pub fn to_dense(&self) -> ndarray::Array2<C64> {
        let d = self.diag.len();
        let mut m = ndarray::Array2::zeros((d, d));
        for n in 0..d {
            m[[n, n]] = C64::new(self.diag[n], 0.0);
        }
        for k in 0..d - self.offset {
            m[[k + self.offset, k]] = self.band[k];
            m[[k, k + self.offset]] = self.band[k].conj();
        }
        m
    }
}

/// `J_0(x) .. J_kmax(x)` for `x >= 0` by Miller's backward recurrence,
/// normalized through `J_0 + 2 sum J_{2m} = 1`.
pub(crate) fn bessel_j_batch(x: f64, k_max: usize) -> Vec<f64> {
    let mut out = vec![0.0; k_max + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let start = k_max + (10.0 * x.cbrt()).ceil() as usize + 40;
    let mut j = vec![0.0f64; start + 2];
    j[start] = 1e-300;
    for k in (1..=start).rev() {
        let next = (2.0 * k as f64 / x) * j[k] - j[k + 1];
        j[k - 1] = next;
        if next.abs() > 1e250 {
            // Rescale the computed suffix to dodge overflow; the final
            // normalization absorbs any constant factor.
            for v in j.iter_mut().skip(k - 1) {
                *v *= 1e-250;
            }
        }
    }
    let mut s = j[0];
    let mut m = 2;
    while m < j.len() {
        s += 2.0 * j[m];
        m += 2;
    }
    for k in 0..=k_max {
        out[k] = j[k] / s;
    }
    out
}

/// `exp(-i tau H) psi`; returns the new state and the number of Chebyshev
/// terms consumed. `tau` may have either sign (the adjoint propagator is
/// `tau -> -tau`).
pub fn expi_action(h: &BandedHermitian, tau: f64, psi: &Array1<C64>) -> Result<(Array1<C64>, usize)> {
    let d = h.dim();
    if psi.len() != d {
        return Err(SimError::InvalidConfig("state/matrix dimension mismatch".into()));
    }
    if tau == 0.0 {
        return Ok((psi.clone(), 0));
    }
    let (emin, emax) = h.gershgorin();
    let c = 0.5 * (emax + emin);
    let w = 0.5 * (emax - emin);
    let head = C64::from_polar(1.0, -c * tau);
    if w == 0.0 {
        // H = c I exactly.
        return Ok((psi.mapv(|z| head * z), 0));
    }
    let x = w * tau;
    let xa = x.abs();
    let k_max = (xa + 16.0 * (xa + 1.0).cbrt() + 25.0).ceil() as usize;
    let coeffs = bessel_j_batch(xa, k_max);
    // The budget above leaves the last coefficients deep below rounding; if
    // they are not, the expansion would be silently truncated mid-series.
    let tail = coeffs[k_max - 2..].iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if tail > 1e-14 {
        return Err(SimError::ConvergenceFailure {
            context: format!("Chebyshev series still live at term {k_max} (x = {x:.3e})"),
            residual: tail,
            tolerance: 1e-14,
        });
    }
    let k_use = {
        let mut k = k_max;
        while k > 1 && coeffs[k].abs() < 1e-17 {
            k -= 1;
        }
        (k + 2).min(k_max)
    };

    // phi_0 = psi, phi_1 = Hs psi, phi_{k+1} = 2 Hs phi_k - phi_{k-1};
    // acc = J_0 phi_0 + 2 sum rot^k J_k phi_k, rot = -i sign(x).
    let rot = if x >= 0.0 { C64::new(0.0, -1.0) } else { C64::new(0.0, 1.0) };
    let inv_w = 1.0 / w;
    let mut prev: Vec<C64> = psi.to_vec();
    let mut cur = vec![C64::new(0.0, 0.0); d];
    let mut tmp = vec![C64::new(0.0, 0.0); d];
    h.matvec(&prev, &mut cur);
    for n in 0..d {
        cur[n] = (cur[n] - c * prev[n]) * inv_w;
    }
    let mut acc: Vec<C64> = prev.iter().map(|z| coeffs[0] * z).collect();
    let mut rot_k = rot;
    for n in 0..d {
        acc[n] += 2.0 * coeffs[1] * rot_k * cur[n];
    }
    for k in 2..=k_use {
        h.matvec(&cur, &mut tmp);
        for n in 0..d {
            let next = 2.0 * (tmp[n] - c * cur[n]) * inv_w - prev[n];
            prev[n] = cur[n];
            cur[n] = next;
        }
        rot_k *= rot;
        let ck = 2.0 * coeffs[k];
        if ck != 0.0 {
            for n in 0..d {
                acc[n] += ck * rot_k * cur[n];
            }
        }
    }
    let out = Array1::from_iter(acc.into_iter().map(|z| head * z));
    Ok((out, k_use))
}
