//! Tractometer-style evaluation against phantom ground truth.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{Mask, Phantom};
use crate::geometry::{Streamline, Vec3};

/// Rasterization sub-step, a quarter of the default tracking step.
pub const RASTER_STEP: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoiEnd {
    Head,
    Tail,
}

/// One endpoint region: bundle index and which end.
pub type Roi = (usize, RoiEnd);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connection {
    /// endpoints in the head and tail of this bundle
    Valid(usize),
    /// both endpoints in regions that do not form a pair
    Invalid(Roi, Roi),
    NoConnection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BundleScore {
    pub name: String,
    pub n_valid: usize,
    pub ol: f64,
    pub or: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n_streamlines: usize,
    pub vc: f64,
    pub vb: usize,
    pub ic: f64,
    pub ib: usize,
    pub nc: f64,
    pub ol: f64,
    pub or: f64,
    pub f1: f64,
    pub bundles: Vec<BundleScore>,
}

fn in_mask(mask: &Mask, p: Vec3) -> bool {
    mask.contains_voxel(p.nearest_voxel())
}

/// Every endpoint region containing `p`, in bundle order, heads first.
pub fn rois_at(phantom: &Phantom, p: Vec3) -> Vec<Roi> {
    let mut out = Vec::new();
    for (i, b) in phantom.bundles.iter().enumerate() {
        if in_mask(&b.head, p) {
            out.push((i, RoiEnd::Head));
        }
        if in_mask(&b.tail, p) {
            out.push((i, RoiEnd::Tail));
        }
    }
    out
}

/// Connection class from the terminal points only.
pub fn classify(s: &Streamline, phantom: &Phantom) -> Connection {
    let a = rois_at(phantom, s.first());
    let b = rois_at(phantom, s.last());
    if a.is_empty() || b.is_empty() {
        return Connection::NoConnection;
    }
    for (i, _) in phantom.bundles.iter().enumerate() {
        let pair = |x: &[Roi], y: &[Roi]| x.contains(&(i, RoiEnd::Head)) && y.contains(&(i, RoiEnd::Tail));
        if pair(&a, &b) || pair(&b, &a) {
            return Connection::Valid(i);
        }
    }
    let (x, y) = (a[0], b[0]);
    Connection::Invalid(x.min(y), x.max(y))
}

/// Voxels visited by the polyline, sampled every `step` along each segment.
pub fn visited_voxels(s: &Streamline, dims: [usize; 3], step: f64, out: &mut Vec<bool>) {
    let idx = |p: Vec3| -> Option<usize> {
        let v = p.nearest_voxel();
        if (0..3).all(|k| v[k] >= 0 && (v[k] as usize) < dims[k]) {
            Some((v[2] as usize * dims[1] + v[1] as usize) * dims[0] + v[0] as usize)
        } else {
            None
        }
    };
    let pts = s.points();
    if let Some(i) = idx(pts[0]) {
        out[i] = true;
    }
    for w in pts.windows(2) {
        let len = w[0].distance(w[1]);
        let n = (len / step).ceil().max(1.0) as usize;
        for k in 1..=n {
            if let Some(i) = idx(w[0].lerp(w[1], k as f64 / n as f64)) {
                out[i] = true;
            }
        }
    }
}

/// Overlap, overreach and Dice (all in percent) of visited voxels against
/// a ground-truth mask.
pub fn overlap_scores(visited: &[bool], truth: &Mask) -> (f64, f64, f64) {
    let gt = truth.data();
    let (mut inter, mut n_v, mut n_gt) = (0usize, 0usize, 0usize);
    for (v, &g) in visited.iter().zip(gt) {
        let g = g != 0;
        inter += (*v && g) as usize;
        n_v += *v as usize;
        n_gt += g as usize;
    }
    if n_gt == 0 {
        return (0.0, 0.0, 0.0);
    }
    let ol = inter as f64 / n_gt as f64;
    let or = (n_v - inter) as f64 / n_gt as f64;
    let f1 = 2.0 * inter as f64 / (n_v + n_gt) as f64;
    (100.0 * ol, 100.0 * or, 100.0 * f1)
}

pub fn score_tractogram(lines: &[Streamline], phantom: &Phantom) -> ScoreReport {
    let n = lines.len();
    let nb = phantom.bundles.len();
    let classes: Vec<Connection> = lines.par_iter().map(|s| classify(s, phantom)).collect();
    let (mut n_vc, mut n_ic) = (0usize, 0usize);
    let mut valid_bundles = BTreeSet::new();
    let mut invalid_pairs = BTreeSet::new();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (k, c) in classes.iter().enumerate() {
        match *c {
            Connection::Valid(b) => {
                n_vc += 1;
                valid_bundles.insert(b);
                members[b].push(k);
            }
            Connection::Invalid(x, y) => {
                n_ic += 1;
                invalid_pairs.insert((x, y));
            }
            Connection::NoConnection => {}
        }
    }
    let dims = phantom.dims();
    let bundles: Vec<BundleScore> = phantom
        .bundles
        .par_iter()
        .enumerate()
        .map(|(b, bundle)| {
            let mut visited = vec![false; dims[0] * dims[1] * dims[2]];
            for &k in &members[b] {
                visited_voxels(&lines[k], dims, RASTER_STEP, &mut visited);
            }
            let (ol, or, f1) = overlap_scores(&visited, &bundle.mask);
            BundleScore {
                name: bundle.name.clone(),
                n_valid: members[b].len(),
                ol,
                or,
                f1,
            }
        })
        .collect();
    if n == 0 {
        return ScoreReport {
            bundles,
            ..ScoreReport::default()
        };
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    let mean = |f: fn(&BundleScore) -> f64| {
        if nb == 0 {
            0.0
        } else {
            bundles.iter().map(f).sum::<f64>() / nb as f64
        }
    };
    ScoreReport {
        n_streamlines: n,
        vc: pct(n_vc),
        vb: valid_bundles.len(),
        ic: pct(n_ic),
        ib: invalid_pairs.len(),
        nc: pct(n - n_vc - n_ic),
        ol: mean(|b| b.ol),
        or: mean(|b| b.or),
        f1: mean(|b| b.f1),
        bundles,
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "streamlines {}", self.n_streamlines)?;
        writeln!(
            f,
            "VC% {:.2}  VB {}  IC% {:.2}  IB {}  NC% {:.2}",
            self.vc, self.vb, self.ic, self.ib, self.nc
        )?;
        writeln!(f, "OL% {:.2}  OR% {:.2}  F1% {:.2}", self.ol, self.or, self.f1)?;
        for b in &self.bundles {
            writeln!(
                f,
                "  {:<16} valid {:>6}  OL% {:6.2}  OR% {:6.2}  F1% {:6.2}",
                b.name, b.n_valid, b.ol, b.or, b.f1
            )?;
        }
        Ok(())
    }
}
