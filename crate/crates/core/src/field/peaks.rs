use super::sh::{basis_matrix, N_COEFFS};
use super::sphere::SphereSampling;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MAX_PEAKS: usize = 5;
pub const DEFAULT_REL_THRESHOLD: f64 = 0.25;

/// Discrete maxima search over a fixed sphere sampling, with the basis
/// matrix precomputed.
#[derive(Debug, Clone)]
pub struct PeakFinder {
    sphere: SphereSampling,
    basis: Vec<f64>,
    /// index of the antipodal vertex
    antipode: Vec<usize>,
    rel_threshold: f64,
}

/// True for the representative of an antipodal pair: the vertex with
/// positive z, or positive y on the equator, or positive x on the y = z = 0 line.
fn is_upper(v: Vec3) -> bool {
    const EPS: f64 = 1e-12;
    if v.z.abs() > EPS {
        v.z > 0.0
    } else if v.y.abs() > EPS {
        v.y > 0.0
    } else {
        v.x > 0.0
    }
}

impl PeakFinder {
    pub fn new(sphere: SphereSampling, rel_threshold: f64) -> Result<Self> {
        if !(rel_threshold > 0.0 && rel_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rel_threshold must be in (0, 1], got {rel_threshold}"
            )));
        }
        let basis = basis_matrix(&sphere.vertices);
        let antipode = sphere
            .vertices
            .iter()
            .map(|&v| {
                sphere
                    .vertices
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (*a.1 + v).norm().partial_cmp(&(*b.1 + v).norm()).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect();
        Ok(PeakFinder {
            sphere,
            basis,
            antipode,
            rel_threshold,
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(SphereSampling::default_peaks(), DEFAULT_REL_THRESHOLD).unwrap()
    }

    pub fn sphere(&self) -> &SphereSampling {
        &self.sphere
    }

    pub fn rel_threshold(&self) -> f64 {
        self.rel_threshold
    }

    pub fn amplitudes(&self, coeffs: &[f64]) -> Vec<f64> {
        self.basis
            .chunks(N_COEFFS)
            .map(|row| row.iter().zip(coeffs).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Peak directions, strongest first.
    pub fn peaks(&self, coeffs: &[f64]) -> Vec<Vec3> {
        self.peaks_with_amplitude(coeffs).into_iter().map(|(v, _)| v).collect()
    }

    pub fn peaks_with_amplitude(&self, coeffs: &[f64]) -> Vec<(Vec3, f64)> {
        let amp = self.amplitudes(coeffs);
        let max = amp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            return Vec::new();
        }
        let cut = self.rel_threshold * max;
        let mut found: Vec<usize> = Vec::new();
        for (i, &a) in amp.iter().enumerate() {
            if a < cut || !self.sphere.adjacency[i].iter().all(|&j| a > amp[j]) {
                continue;
            }
            let rep = if is_upper(self.sphere.vertices[i]) { i } else { self.antipode[i] };
            if !found.contains(&rep) {
                found.push(rep);
            }
        }
        found.sort_by(|&a, &b| amp[b].partial_cmp(&amp[a]).unwrap().then(a.cmp(&b)));
        found.truncate(MAX_PEAKS);
        found.into_iter().map(|i| (self.sphere.vertices[i], amp[i])).collect()
    }
}

/// One-shot peak extraction; prefer a cached [`PeakFinder`] in loops.
pub fn peaks(coeffs: &[f64], sphere: &SphereSampling, rel_threshold: f64) -> Result<Vec<Vec3>> {
    if coeffs.len() != N_COEFFS {
        return Err(Error::InvalidArgument(format!(
            "expected {N_COEFFS} SH coefficients, got {}",
            coeffs.len()
        )));
    }
    Ok(PeakFinder::new(sphere.clone(), rel_threshold)?.peaks(coeffs))
}
