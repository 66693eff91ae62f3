//! Synthetic fODF phantoms with known bundles.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sh::{basis_matrix, N_COEFFS};
use super::sphere::SphereSampling;
use super::volume::{Mask, ShVolume};
use crate::error::{Error, Result};
use crate::geometry::{resample, Grid, Streamline, Vec3};

const CENTERLINE_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Xz,
    Yz,
}

impl Plane {
    fn axes(self) -> (Vec3, Vec3) {
        let (x, y, z) = (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0));
        match self {
            Plane::Xy => (x, y),
            Plane::Xz => (x, z),
            Plane::Yz => (y, z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BundleShape {
    Straight {
        start: [f64; 3],
        end: [f64; 3],
    },
    /// Circular arc `center + R (cos θ e1 + sin θ e2)` for θ from
    /// `start_deg` to `end_deg`.
    Arc {
        center: [f64; 3],
        bend_radius: f64,
        start_deg: f64,
        end_deg: f64,
        plane: Plane,
    },
    /// Two straight bundles through `center`, the first along the plane's
    /// first axis and the second rotated by `angle_deg`. They are named
    /// `<name>_a` and `<name>_b`.
    CrossingPair {
        center: [f64; 3],
        half_length: f64,
        angle_deg: f64,
        plane: Plane,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub name: String,
    /// tube radius in voxels
    pub radius: f64,
    pub shape: BundleShape,
}

fn default_kappa() -> f64 {
    10.0
}

fn default_roi_length() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub bundles: Vec<BundleSpec>,
    #[serde(default)]
    pub seed: u64,
    /// kernel sharpness
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// arc length from each end covered by the head/tail ROIs
    #[serde(default = "default_roi_length")]
    pub roi_length: f64,
    /// std of Gaussian noise added to in-mask coefficients
    #[serde(default)]
    pub noise: f64,
}

impl PhantomSpec {
    fn base(dims: [usize; 3], bundles: Vec<BundleSpec>) -> Self {
        PhantomSpec {
            dims,
            bundles,
            seed: 0,
            kappa: default_kappa(),
            roi_length: default_roi_length(),
            noise: 0.0,
        }
    }

    /// One straight bundle along x through the middle of an `n`-cube.
    pub fn straight(n: usize) -> Self {
        let c = (n as f64 - 1.0) / 2.0;
        Self::base(
            [n; 3],
            vec![BundleSpec {
                name: "straight".into(),
                radius: 2.5,
                shape: BundleShape::Straight {
                    start: [3.0, c, c],
                    end: [n as f64 - 4.0, c, c],
                },
            }],
        )
    }

    /// A straight bundle along x plus a half-circle arc in the same slab.
    pub fn straight_and_arc(n: usize) -> Self {
        let s = n as f64 / 32.0;
        let cz = (n as f64 - 1.0) / 2.0;
        Self::base(
            [n; 3],
            vec![
                BundleSpec {
                    name: "straight".into(),
                    radius: 2.0 * s,
                    shape: BundleShape::Straight {
                        start: [3.0 * s, 6.0 * s, cz],
                        end: [28.0 * s, 6.0 * s, cz],
                    },
                },
                BundleSpec {
                    name: "arc".into(),
                    radius: 2.0 * s,
                    shape: BundleShape::Arc {
                        center: [15.5 * s, 13.0 * s, cz],
                        bend_radius: 10.0 * s,
                        start_deg: 15.0,
                        end_deg: 165.0,
                        plane: Plane::Xy,
                    },
                },
            ],
        )
    }

    /// Two bundles crossing at 90 degrees in the middle of the volume.
    pub fn crossing(n: usize) -> Self {
        let c = (n as f64 - 1.0) / 2.0;
        Self::base(
            [n; 3],
            vec![BundleSpec {
                name: "cross".into(),
                radius: 2.5,
                shape: BundleShape::CrossingPair {
                    center: [c, c, c],
                    half_length: c - 3.0,
                    angle_deg: 90.0,
                    plane: Plane::Xy,
                },
            }],
        )
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub name: String,
    pub mask: Mask,
    pub head: Mask,
    pub tail: Mask,
    /// centerline, sampled every half voxel
    pub centroid: Streamline,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: ShVolume,
    pub tracking_mask: Mask,
    pub seeding_mask: Mask,
    pub bundles: Vec<Bundle>,
    /// `tracking_mask` as a 0/1 field for interpolation
    pub tracking_field: Grid,
}

impl Phantom {
    pub fn dims(&self) -> [usize; 3] {
        self.tracking_mask.dims()
    }

    /// Reassembles a phantom from stored pieces, checking that every grid
    /// has the same dimensions.
    pub fn from_parts(volume: ShVolume, tracking_mask: Mask, seeding_mask: Mask, bundles: Vec<Bundle>) -> Result<Self> {
        let dims = tracking_mask.dims();
        let mut all = vec![volume.grid().dims, seeding_mask.dims()];
        for b in &bundles {
            all.extend([b.mask.dims(), b.head.dims(), b.tail.dims()]);
        }
        if let Some(d) = all.into_iter().find(|d| *d != dims) {
            return Err(Error::shape("phantom parts", &dims, &d));
        }
        if bundles.is_empty() {
            return Err(Error::Spec("phantom needs at least one bundle".into()));
        }
        let tracking_field = tracking_mask.to_grid();
        Ok(Phantom {
            volume,
            tracking_mask,
            seeding_mask,
            bundles,
            tracking_field,
        })
    }
}

/// Least-squares order-6 fit of the axially symmetric kernel
/// `exp(κ((u·d)² - 1))`, sampled on a 642-direction icosphere.
pub struct KernelFitter {
    dirs: Vec<Vec3>,
    /// `[28, n_dirs]` pseudo-inverse of the basis matrix
    pinv: DMatrix<f64>,
    kappa: f64,
}

impl KernelFitter {
    pub fn new(kappa: f64) -> Self {
        let dirs = SphereSampling::icosphere(3).vertices;
        let b = DMatrix::from_row_slice(dirs.len(), N_COEFFS, &basis_matrix(&dirs));
        let btb = b.transpose() * &b;
        let pinv = btb
            .cholesky()
            .expect("basis Gram matrix is positive definite")
            .solve(&b.transpose());
        KernelFitter { dirs, pinv, kappa }
    }

    pub fn fit(&self, d: Vec3) -> [f64; N_COEFFS] {
        let f: Vec<f64> = self
            .dirs
            .iter()
            .map(|u| (self.kappa * (u.dot(d).powi(2) - 1.0)).exp())
            .collect();
        let mut out = [0.0; N_COEFFS];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.pinv.row(i).iter().zip(&f).map(|(a, b)| a * b).sum();
        }
        out
    }
}

struct Expanded {
    name: String,
    radius: f64,
    /// dense samples and cumulative arc length
    pts: Vec<Vec3>,
    arc: Vec<f64>,
}

fn straight_pts(a: Vec3, b: Vec3) -> Vec<Vec3> {
    let n = ((b - a).norm() / CENTERLINE_STEP).ceil().max(1.0) as usize;
    (0..=n).map(|i| a.lerp(b, i as f64 / n as f64)).collect()
}

fn expand(spec: &BundleSpec) -> Result<Vec<Expanded>> {
    if !(spec.radius > 0.0) {
        return Err(Error::Spec(format!("bundle {}: radius must be positive", spec.name)));
    }
    let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
    let lines: Vec<(String, Vec<Vec3>)> = match &spec.shape {
        BundleShape::Straight { start, end } => {
            if v(*start).distance(v(*end)) <= 0.0 {
                return Err(Error::Spec(format!("bundle {}: zero length", spec.name)));
            }
            vec![(spec.name.clone(), straight_pts(v(*start), v(*end)))]
        }
        BundleShape::Arc {
            center,
            bend_radius,
            start_deg,
            end_deg,
            plane,
        } => {
            let sweep = (end_deg - start_deg).to_radians();
            if !(*bend_radius > 0.0) || sweep == 0.0 {
                return Err(Error::Spec(format!("bundle {}: degenerate arc", spec.name)));
            }
            let (e1, e2) = plane.axes();
            let n = ((bend_radius * sweep.abs()) / CENTERLINE_STEP).ceil() as usize;
            let pts = (0..=n)
                .map(|i| {
                    let th = start_deg.to_radians() + sweep * i as f64 / n as f64;
                    v(*center) + e1 * (bend_radius * th.cos()) + e2 * (bend_radius * th.sin())
                })
                .collect();
            vec![(spec.name.clone(), pts)]
        }
        BundleShape::CrossingPair {
            center,
            half_length,
            angle_deg,
            plane,
        } => {
            if !(*half_length > 0.0) {
                return Err(Error::Spec(format!("bundle {}: degenerate crossing", spec.name)));
            }
            let (e1, e2) = plane.axes();
            let th = angle_deg.to_radians();
            let d2 = e1 * th.cos() + e2 * th.sin();
            let c = v(*center);
            vec![
                (format!("{}_a", spec.name), straight_pts(c - e1 * *half_length, c + e1 * *half_length)),
                (format!("{}_b", spec.name), straight_pts(c - d2 * *half_length, c + d2 * *half_length)),
            ]
        }
    };
    Ok(lines
        .into_iter()
        .map(|(name, pts)| {
            let mut arc = vec![0.0; pts.len()];
            for i in 1..pts.len() {
                arc[i] = arc[i - 1] + pts[i].distance(pts[i - 1]);
            }
            Expanded {
                name,
                radius: spec.radius,
                pts,
                arc,
            }
        })
        .collect())
}

/// Builds the phantom volume, masks and ground truth from `spec`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    if spec.bundles.is_empty() {
        return Err(Error::Spec("phantom needs at least one bundle".into()));
    }
    if spec.dims.iter().any(|&d| !(16..=64).contains(&d)) {
        return Err(Error::Spec(format!("dims {:?} must each lie in [16, 64]", spec.dims)));
    }
    if !(spec.kappa > 0.0) || !(spec.roi_length > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::Spec("kappa and roi_length must be positive, noise non-negative".into()));
    }
    let dims = spec.dims;
    let mut expanded = Vec::new();
    for b in &spec.bundles {
        expanded.extend(expand(b)?);
    }
    let mut names = std::collections::HashSet::new();
    for e in &expanded {
        if !names.insert(e.name.clone()) {
            return Err(Error::Spec(format!("duplicate bundle name {}", e.name)));
        }
    }

    let n_vox = dims[0] * dims[1] * dims[2];
    let mut dirs_per_voxel: Vec<Vec<Vec3>> = vec![Vec::new(); n_vox];
    let mut bundles = Vec::new();
    for e in &expanded {
        let mut mask = Mask::zeros(dims);
        let mut head = Mask::zeros(dims);
        let mut tail = Mask::zeros(dims);
        let total = *e.arc.last().unwrap();
        let (mut lo, mut hi) = ([f64::MAX; 3], [f64::MIN; 3]);
        for p in &e.pts {
            for (i, c) in p.to_array().into_iter().enumerate() {
                lo[i] = lo[i].min(c - e.radius);
                hi[i] = hi[i].max(c + e.radius);
            }
        }
        let range = |i: usize| {
            let a = lo[i].ceil().max(0.0) as usize;
            let b = (hi[i].floor() as i64).min(dims[i] as i64 - 1);
            a..(b + 1).max(a as i64) as usize
        };
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let p = Vec3::new(x as f64, y as f64, z as f64);
                    let (k, d2) = e
                        .pts
                        .iter()
                        .enumerate()
                        .map(|(k, q)| (k, (*q - p).dot(*q - p)))
                        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                        .unwrap();
                    if d2.sqrt() > e.radius {
                        continue;
                    }
                    mask.set(x, y, z, true);
                    let s = e.arc[k];
                    if s <= spec.roi_length {
                        head.set(x, y, z, true);
                    }
                    if s >= total - spec.roi_length {
                        tail.set(x, y, z, true);
                    }
                    let (a, b) = (k.saturating_sub(1), (k + 1).min(e.pts.len() - 1));
                    let t = (e.pts[b] - e.pts[a]).normalized().unwrap();
                    dirs_per_voxel[(z * dims[1] + y) * dims[0] + x].push(t);
                }
            }
        }
        if mask.is_empty() {
            return Err(Error::Spec(format!("bundle {} covers no voxel", e.name)));
        }
        if head.intersects(&tail) {
            return Err(Error::Spec(format!("bundle {}: head and tail ROIs overlap", e.name)));
        }
        if head.is_empty() || tail.is_empty() {
            return Err(Error::Spec(format!("bundle {}: ROI outside the volume", e.name)));
        }
        let n = ((total / 0.5).ceil() as usize + 1).max(2);
        let centroid = resample(&Streamline::new(e.pts.clone())?, n)?;
        bundles.push(Bundle {
            name: e.name.clone(),
            mask,
            head,
            tail,
            centroid,
        });
    }

    let fitter = KernelFitter::new(spec.kappa);
    let mut volume = ShVolume::zeros(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let dirs = &dirs_per_voxel[(z * dims[1] + y) * dims[0] + x];
                if dirs.is_empty() {
                    continue;
                }
                let c = volume.coeffs_mut(x, y, z);
                let w = 1.0 / dirs.len() as f64;
                for &d in dirs {
                    for (ci, f) in c.iter_mut().zip(fitter.fit(d)) {
                        *ci += w * f;
                    }
                }
                if spec.noise > 0.0 {
                    for ci in c.iter_mut() {
                        *ci += noise.sample(&mut rng);
                    }
                }
            }
        }
    }

    let mut tracking_mask = Mask::zeros(dims);
    let mut seeding_mask = Mask::zeros(dims);
    for b in &bundles {
        tracking_mask.union_with(&b.mask);
        seeding_mask.union_with(&b.head);
        seeding_mask.union_with(&b.tail);
    }
    // Tracking stops where the interpolated mask drops below the threshold,
    // up to a voxel past the last mask voxel; endpoint regions reach there.
    for b in &mut bundles {
        let head_shell = b.head.dilated().minus(&tracking_mask);
        let tail_shell = b.tail.dilated().minus(&tracking_mask);
        b.head.union_with(&head_shell);
        b.tail.union_with(&tail_shell);
        if b.head.intersects(&b.tail) {
            return Err(Error::Spec(format!("bundle {}: head and tail ROIs overlap", b.name)));
        }
    }
    let tracking_field = tracking_mask.to_grid();
    Ok(Phantom {
        volume,
        tracking_mask,
        seeding_mask,
        bundles,
        tracking_field,
    })
}
