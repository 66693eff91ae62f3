//! Synthetic streamlines for oracle pre-training: classically shaped ones,
//! and candidates drawn around a phantom's bundles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::Result;
use crate::field::Phantom;
use crate::geometry::{Streamline, Vec3};
use crate::irt::{reference_label, ReferenceFilter};
use crate::oracle::LabeledSet;

const STEP: f64 = 0.5;

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vec3::new(v[0], v[1], v[2])
}

fn any_perpendicular<R: Rng>(d: Vec3, rng: &mut R) -> Vec3 {
    loop {
        let r = random_unit(rng);
        if let Some(p) = (r - d * r.dot(d)).normalized() {
            return p;
        }
    }
}

fn rotate(v: Vec3, axis: Vec3, theta: f64) -> Vec3 {
    let (s, c) = theta.sin_cos();
    v * c + axis.cross(v) * s + axis * (axis.dot(v) * (1.0 - c))
}

/// Integrates a curve of `n` steps whose direction bends by `kappa(i)`
/// radians per unit length towards a slowly twisting normal.
struct Walker {
    p: Vec3,
    d: Vec3,
    normal: Vec3,
    points: Vec<Vec3>,
}

impl Walker {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let p = Vec3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let d = random_unit(rng);
        let normal = any_perpendicular(d, rng);
        Walker {
            p,
            d,
            normal,
            points: vec![p],
        }
    }

    fn advance(&mut self, len: f64, kappa: f64, torsion: f64) {
        let n = (len / STEP).round().max(1.0) as usize;
        for _ in 0..n {
            let axis = self.d.cross(self.normal);
            self.d = rotate(self.d, axis, kappa * STEP).normalized().unwrap();
            self.normal = rotate(self.normal, self.d, torsion * STEP);
            self.normal = (self.normal - self.d * self.normal.dot(self.d)).normalized().unwrap();
            self.p = self.p + self.d * STEP;
            self.points.push(self.p);
        }
    }

    fn kink<R: Rng>(&mut self, angle: f64, rng: &mut R) {
        let axis = any_perpendicular(self.d, rng);
        self.d = rotate(self.d, axis, angle);
        self.normal = any_perpendicular(self.d, rng);
    }

    fn finish<R: Rng>(self, jitter: f64, rng: &mut R) -> Streamline {
        let noise = Normal::new(0.0, jitter).unwrap();
        let pts = self
            .points
            .into_iter()
            .map(|p| p + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng)))
            .collect();
        Streamline::new(pts).expect("synthetic curve is non-degenerate")
    }
}

/// A smooth, gently curving streamline of length 20-80.
pub fn plausible<R: Rng>(rng: &mut R) -> Streamline {
    let mut w = Walker::new(rng);
    let total = rng.gen_range(20.0..80.0);
    let pieces = rng.gen_range(1..=3);
    for _ in 0..pieces {
        let kappa = rng.gen_range(0.0..0.06);
        let torsion = rng.gen_range(-0.03..0.03);
        w.advance(total / pieces as f64, kappa, torsion);
    }
    w.finish(0.05, rng)
}

/// A streamline with a shape no fibre bundle takes: sharp kinks, a tight
/// loop, a random walk, or a very short fragment.
pub fn implausible<R: Rng>(rng: &mut R) -> Streamline {
    let mut w = Walker::new(rng);
    match rng.gen_range(0..4) {
        0 => {
            let kinks = rng.gen_range(1..=3);
            let total = rng.gen_range(20.0..80.0);
            let seg = total / (kinks + 1) as f64;
            w.advance(seg, rng.gen_range(0.0..0.05), 0.0);
            for _ in 0..kinks {
                w.kink(rng.gen_range(60f64..150.0).to_radians(), rng);
                w.advance(seg, rng.gen_range(0.0..0.05), 0.0);
            }
        }
        1 => {
            w.advance(rng.gen_range(8.0..30.0), rng.gen_range(0.0..0.05), 0.0);
            let r = rng.gen_range(1.5..4.0);
            w.advance(2.0 * std::f64::consts::PI * r * rng.gen_range(0.8..1.5), 1.0 / r, 0.0);
            w.advance(rng.gen_range(8.0..30.0), rng.gen_range(0.0..0.05), 0.0);
        }
        2 => {
            let n = rng.gen_range(10..40);
            for _ in 0..n {
                w.advance(rng.gen_range(1.0..3.0), 0.0, 0.0);
                w.kink(rng.gen_range(20f64..100.0).to_radians(), rng);
            }
        }
        _ => {
            w.advance(rng.gen_range(2.0..8.0), rng.gen_range(0.0..0.06), 0.0);
        }
    }
    w.finish(0.05, rng)
}

/// `n` streamlines, half of each class, split 80/10/10 per class.
pub fn labeled_set(n: usize, seed: u64) -> Result<LabeledSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let good = i % 2 == 0;
        lines.push(if good { plausible(&mut rng) } else { implausible(&mut rng) });
        labels.push(good);
    }
    LabeledSet::from_labeled(lines, labels, seed.wrapping_add(1))
}

/// A bundle centerline shifted, wobbled and trimmed a little.
fn jittered<R: Rng>(c: &Streamline, rng: &mut R) -> Streamline {
    let shift = Normal::new(0.0, 0.4).unwrap();
    let fine = Normal::new(0.0, 0.05).unwrap();
    let offset = Vec3::new(shift.sample(rng), shift.sample(rng), shift.sample(rng));
    let d = (c.last() - c.first()).normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0));
    let side = any_perpendicular(d, rng);
    let (amp, waves, phase) = (
        rng.gen_range(0.0..0.3),
        rng.gen_range(1..=2) as f64,
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let pts = c.points();
    let (lo, hi) = (rng.gen_range(0..=2), pts.len() - rng.gen_range(0..=2));
    let n = (hi - lo) as f64;
    let out = pts[lo..hi]
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let t = i as f64 / n;
            let wobble = side * (amp * (std::f64::consts::PI * waves * t + phase).sin());
            p + offset + wobble + Vec3::new(fine.sample(rng), fine.sample(rng), fine.sample(rng))
        })
        .collect();
    Streamline::new(out).expect("jittered centerline is non-degenerate")
}

/// Truncates `s`, bends its second part off course, or adds a hook at
/// its end.
fn corrupted<R: Rng>(s: &Streamline, rng: &mut R) -> Streamline {
    let pts = s.points();
    let n = pts.len();
    let out: Vec<Vec3> = match rng.gen_range(0..3) {
        0 => {
            let keep = ((n as f64 * rng.gen_range(0.4..0.85)) as usize).max(2);
            pts[..keep].to_vec()
        }
        1 => {
            let k = ((n as f64 * rng.gen_range(0.3..0.7)) as usize).clamp(1, n - 2);
            let pivot = pts[k];
            let axis = any_perpendicular((pts[k + 1] - pivot).normalized().unwrap(), rng);
            let theta = rng.gen_range(40f64..120.0).to_radians();
            let mut v = pts[..=k].to_vec();
            v.extend(pts[k + 1..].iter().map(|&p| pivot + rotate(p - pivot, axis, theta)));
            v
        }
        _ => {
            let d = (pts[n - 1] - pts[n - 2]).normalized().unwrap();
            let axis = any_perpendicular(d, rng);
            let hook = rotate(d, axis, rng.gen_range(40f64..90.0).to_radians());
            let mut v = pts.to_vec();
            let steps = (rng.gen_range(3.0..8.0) / STEP) as usize;
            for i in 1..=steps {
                v.push(pts[n - 1] + hook * (i as f64 * STEP));
            }
            v
        }
    };
    Streamline::new(out).expect("corrupted centerline is non-degenerate")
}

/// `n` candidates around the bundles of `phantom`: half jittered
/// centerlines, half corrupted ones, in random orientation. Labels come
/// from the reference filter, so classes need not be balanced; splits are
/// 80/10/10 per class.
pub fn phantom_labeled_set(phantom: &Phantom, n: usize, seed: u64) -> Result<LabeledSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n);
    for i in 0..n {
        let b = &phantom.bundles[rng.gen_range(0..phantom.bundles.len())];
        let mut s = jittered(&b.centroid, &mut rng);
        if i % 2 == 1 {
            s = corrupted(&s, &mut rng);
        }
        if rng.gen_bool(0.5) {
            s = s.reversed();
        }
        lines.push(s);
    }
    let filter = ReferenceFilter {
        phantom,
        in_mask_fraction: 0.9,
        n_points: 64,
    };
    let labels = reference_label(&filter, &lines)?;
    LabeledSet::from_labeled(lines, labels, seed.wrapping_add(1))
}
