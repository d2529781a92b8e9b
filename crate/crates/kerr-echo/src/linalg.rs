//! Dense Hermitian eigensolver and the few spectral utilities built on it.
//!
//! The solver is the classic two-stage scheme: unitary Householder reduction
//! to a real symmetric tridiagonal matrix, then implicit-shift QL iteration.
//! It exists so the crate needs no system BLAS/LAPACK; sizes here are a few
//! hundred levels and the solver is called per segment (small oracles) or
//! once per convergence gate (dissipative runs), so cubic cost with plain
//! loops is acceptable.

use ndarray::Array2;

use crate::error::{Result, SimError};
use crate::fock::DensityMatrix;
use crate::C64;

/// Eigendecomposition `A = V diag(values) V^dagger` of a Hermitian matrix,
/// eigenvalues ascending, eigenvector columns orthonormal.
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: Array2<C64>,
}

impl Eigh {
    /// `exp(-i A t)` assembled in the eigenbasis.
    pub fn evolution(&self, t: f64) -> Array2<C64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, lam) in self.values.iter().enumerate() {
            let ph = C64::from_polar(1.0, -lam * t);
            for k in 0..n {
                scaled[[k, j]] *= ph;
            }
        }
        scaled.dot(&conj_transpose(&self.vectors))
    }
}

pub fn conj_transpose(m: &Array2<C64>) -> Array2<C64> {
    m.t().mapv(|z| z.conj())
}

pub fn max_abs_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0f64, f64::max)
}

fn reject_non_finite(a: &Array2<C64>) -> Result<()> {
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(SimError::ConvergenceFailure {
            context: "eigensolver input contains non-finite entries".into(),
            residual: f64::INFINITY,
            tolerance: 0.0,
        });
    }
    Ok(())
}

/// Full eigendecomposition. The input is symmetrized internally, so slightly
/// non-Hermitian matrices (rounding-level defects from propagation) are fine.
pub fn eigh(a: &Array2<C64>) -> Result<Eigh> {
    reject_non_finite(a)?;
    let (mut d, mut e, q) = tridiagonalize(a, true);
    let mut z = q.expect("accumulation requested");
    ql_implicit(&mut d, &mut e, Some(&mut z))?;
    sort_pairs(&mut d, Some(&mut z));
    Ok(Eigh { values: d, vectors: z })
}

/// Eigenvalues only; skips all eigenvector accumulation.
pub fn eigvalsh(a: &Array2<C64>) -> Result<Vec<f64>> {
    reject_non_finite(a)?;
    let (mut d, mut e, _) = tridiagonalize(a, false);
    ql_implicit(&mut d, &mut e, None)?;
    sort_pairs(&mut d, None);
    Ok(d)
}

/// Trace distance `0.5 * sum |eig(rho - sigma)|`, exact up to the
/// eigensolver itself (no norm bounds or truncated expansions).
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(SimError::InvalidConfig("trace distance dimension mismatch".into()));
    }
    let delta = rho.matrix() - sigma.matrix();
    Ok(0.5 * eigvalsh(&delta)?.iter().map(|x| x.abs()).sum::<f64>())
}

/// Householder reduction of a Hermitian matrix to real symmetric tridiagonal
/// form. Returns `(diag, subdiag, Q)` with `A = Q T Q^dagger`; `subdiag` has
/// length `n` with the last slot zero (workspace for the QL sweep). `Q` is
/// accumulated only when requested.
fn tridiagonalize(a: &Array2<C64>, want_q: bool) -> (Vec<f64>, Vec<f64>, Option<Array2<C64>>) {
    let n = a.nrows();
    // Work on the Hermitian average so rounding-level asymmetry in the input
    // cannot leak into the reduction.
    let mut w = Array2::<C64>::zeros((n, n));
    for j in 0..n {
        for k in 0..n {
            w[[j, k]] = 0.5 * (a[[j, k]] + a[[k, j]].conj());
        }
    }

    let mut csub = vec![C64::new(0.0, 0.0); n.saturating_sub(1)];
    let mut reflectors: Vec<(usize, Vec<C64>, f64)> = Vec::new();

    for k in 0..n.saturating_sub(2) {
        let m = n - k - 1;
        let x: Vec<C64> = (0..m).map(|i| w[[k + 1 + i, k]]).collect();
        // Scale the column by its largest component before forming the
        // reflector. Columns here can sit at 1e-150 and below (tails of a
        // difference of two nearly identical states), where |x|^2 underflows
        // and 2 / |v|^2 overflows to infinity. The reflector itself is
        // invariant under v -> c v, so all of it is computed at unit scale
        // and only the subdiagonal entry alpha carries the scale back.
        let scale = x
            .iter()
            .map(|z| z.re.abs().max(z.im.abs()))
            .fold(0.0f64, f64::max);
        if scale == 0.0 {
            csub[k] = C64::new(0.0, 0.0);
            continue;
        }
        let y: Vec<C64> = x.iter().map(|z| z / scale).collect();
        let ynorm = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        // Reflect y onto -e^{i arg y_0} |y| e_1; this sign choice avoids
        // cancellation in v_0 = y_0 - alpha.
        let phase0 = if y[0].norm() > 0.0 { y[0] / y[0].norm() } else { C64::new(1.0, 0.0) };
        let alpha = -phase0 * ynorm * scale;
        let mut v = y;
        v[0] += phase0 * ynorm;
        // ynorm >= 1 after the scaling and the sign choice only adds
        // magnitude, so vnorm2 >= 2 and beta stays bounded.
        let vnorm2 = v.iter().map(|z| z.norm_sqr()).sum::<f64>();
        let beta = 2.0 / vnorm2;

        // Hermitian rank-2 update of the trailing block B = w[k+1.., k+1..]:
        // H B H = B - v q^dagger - q v^dagger with q = p - (beta/2)(v^dagger p) v,
        // p = beta B v.
        let mut p = vec![C64::new(0.0, 0.0); m];
        for i in 0..m {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..m {
                acc += w[[k + 1 + i, k + 1 + j]] * v[j];
            }
            p[i] = beta * acc;
        }
        let vp: C64 = v.iter().zip(&p).map(|(vi, pi)| vi.conj() * pi).sum();
        let half = 0.5 * beta * vp; // real for Hermitian B, keep as complex
        let q: Vec<C64> = p.iter().zip(&v).map(|(pi, vi)| pi - half * vi).collect();
        for i in 0..m {
            for j in 0..m {
                let upd = v[i] * q[j].conj() + q[i] * v[j].conj();
                w[[k + 1 + i, k + 1 + j]] -= upd;
            }
        }

        csub[k] = alpha;
        w[[k + 1, k]] = alpha;
        w[[k, k + 1]] = alpha.conj();
        for i in k + 2..n {
            w[[i, k]] = C64::new(0.0, 0.0);
            w[[k, i]] = C64::new(0.0, 0.0);
        }
        reflectors.push((k, v, beta));
    }

    let mut diag: Vec<f64> = (0..n).map(|i| w[[i, i]].re).collect();
    if n >= 2 {
        csub[n - 2] = w[[n - 1, n - 2]];
    }

    // Rotate the complex subdiagonal onto the positive real axis with a
    // diagonal phase matrix absorbed into Q.
    let mut phases = vec![C64::new(1.0, 0.0); n];
    let mut sub = vec![0.0f64; n];
    for k in 0..n.saturating_sub(1) {
        let r = csub[k].norm();
        sub[k] = r;
        phases[k + 1] = if r > 0.0 { phases[k] * (csub[k] / r) } else { phases[k] };
    }

    let q = if want_q {
        let mut q = Array2::<C64>::eye(n);
        // Q = H_0 H_1 ... H_last, built by applying reflectors right-to-left;
        // H_k touches only rows k+1 and below.
        for (k, v, beta) in reflectors.iter().rev() {
            let m = v.len();
            for c in 0..n {
                let mut s = C64::new(0.0, 0.0);
                for i in 0..m {
                    s += v[i].conj() * q[[k + 1 + i, c]];
                }
                s *= *beta;
                for i in 0..m {
                    q[[k + 1 + i, c]] -= s * v[i];
                }
            }
        }
        for j in 0..n {
            for i in 0..n {
                q[[i, j]] *= phases[j];
            }
        }
        Some(q)
    } else {
        None
    };

    let _ = diag.len();
    if n >= 1 {
        diag[n - 1] = w[[n - 1, n - 1]].re;
    }
    (diag, sub, q)
}

/// Implicit-shift QL on a real symmetric tridiagonal matrix. `e[i]` couples
/// levels `i` and `i+1`; `e[n-1]` is workspace. Rotations are accumulated
/// into the columns of `z` when provided.
fn ql_implicit(d: &mut [f64], e: &mut [f64], mut z: Option<&mut Array2<C64>>) -> Result<()> {
    let n = d.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(SimError::ConvergenceFailure {
                    context: format!("tridiagonal QL stalled at eigenvalue {l}"),
                    residual: e[l].abs(),
                    tolerance: f64::EPSILON,
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    // Rotation annihilated early; restart the sweep.
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if let Some(zm) = z.as_deref_mut() {
                    for k in 0..n {
                        let fz = zm[[k, i + 1]];
                        zm[[k, i + 1]] = zm[[k, i]] * s + fz * c;
                        zm[[k, i]] = zm[[k, i]] * c - fz * s;
                    }
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

fn sort_pairs(d: &mut Vec<f64>, z: Option<&mut Array2<C64>>) {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap_or(std::cmp::Ordering::Equal));
    let sorted: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    *d = sorted;
    if let Some(zm) = z {
        let src = zm.clone();
        for (new_col, &old_col) in order.iter().enumerate() {
            for k in 0..n {
                zm[[k, new_col]] = src[[k, old_col]];
            }
        }
    }
}
