//! Real, symmetric (even-order) spherical-harmonic basis.
//!
//! Coefficient `j` belongs to degree `l` and order `m` with
//! `j = l(l-1)/2 + l + m` for `l = 0, 2, .., order` and `m = -l..=l`:
//!
//! ```text
//! Y_j(θ, φ) = √2 N_l^|m| P_l^|m|(cos θ) sin(|m| φ)   m < 0
//!           =    N_l^0   P_l^0(cos θ)                m = 0
//!           = √2 N_l^m   P_l^m(cos θ) cos(m φ)        m > 0
//! N_l^m = sqrt((2l + 1) / 4π · (l - m)! / (l + m)!)
//! ```
//!
//! `P_l^m` carries no Condon-Shortley phase. θ is the polar angle from +z,
//! φ the azimuth from +x towards +y.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const SH_ORDER: usize = 6;
pub const N_COEFFS: usize = 28;

/// Number of coefficients of the symmetric basis up to `order`.
pub fn n_coeffs(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Index of `(l, m)` in the coefficient vector.
pub fn sh_index(l: usize, m: i64) -> usize {
    (l * l.saturating_sub(1)) / 2 + (l as i64 + m) as usize
}

/// `(l, m)` of every coefficient, in storage order.
pub fn sh_degrees(order: usize) -> Vec<(usize, i64)> {
    let mut out = Vec::new();
    for l in (0..=order).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            out.push((l, m));
        }
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Associated Legendre `P_l^m(x)` for all `l <= lmax`, `m <= l`, by the
/// standard three-term recurrence. Stored at `[l * (lmax + 1) + m]`.
fn legendre_table(x: f64, lmax: usize) -> Vec<f64> {
    let w = lmax + 1;
    let mut p = vec![0.0; w * w];
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for m in 0..=lmax {
        if m > 0 {
            pmm *= (2 * m - 1) as f64 * s;
        }
        p[m * w + m] = pmm;
        if m < lmax {
            p[(m + 1) * w + m] = x * (2 * m + 1) as f64 * pmm;
        }
        for l in m + 2..=lmax {
            p[l * w + m] =
                ((2 * l - 1) as f64 * x * p[(l - 1) * w + m] - (l + m - 1) as f64 * p[(l - 2) * w + m]) / (l - m) as f64;
        }
    }
    p
}

/// Basis values `Y_j(u)` for a unit vector `u`.
pub fn sh_basis(u: Vec3) -> [f64; N_COEFFS] {
    let mut out = [0.0; N_COEFFS];
    sh_basis_into(u, SH_ORDER, &mut out);
    out
}

pub(crate) fn sh_basis_into(u: Vec3, order: usize, out: &mut [f64]) {
    let x = u.z.clamp(-1.0, 1.0);
    let phi = u.y.atan2(u.x);
    let p = legendre_table(x, order);
    let w = order + 1;
    let four_pi = 4.0 * std::f64::consts::PI;
    let mut j = 0;
    for l in (0..=order).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let norm = ((2 * l + 1) as f64 / four_pi * factorial(l - am) / factorial(l + am)).sqrt();
            let plm = p[l * w + am];
            out[j] = match m.cmp(&0) {
                std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * norm * plm * (am as f64 * phi).sin(),
                std::cmp::Ordering::Equal => norm * plm,
                std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * norm * plm * (am as f64 * phi).cos(),
            };
            j += 1;
        }
    }
}

/// Amplitude `Σ c_j Y_j(u)` of an order-6 SH function.
pub fn sh_eval(coeffs: &[f64], u: Vec3) -> Result<f64> {
    if coeffs.len() != N_COEFFS {
        return Err(Error::InvalidArgument(format!(
            "expected {N_COEFFS} SH coefficients, got {}",
            coeffs.len()
        )));
    }
    if !u.is_finite() || (u.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "direction must be unit length, |u| = {}",
            u.norm()
        )));
    }
    let b = sh_basis(u);
    Ok(coeffs.iter().zip(b.iter()).map(|(c, y)| c * y).sum())
}

/// Row-major `[n_dirs, 28]` basis matrix.
pub fn basis_matrix(dirs: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dirs.len() * N_COEFFS);
    for &d in dirs {
        out.extend_from_slice(&sh_basis(d));
    }
    out
}
