//! Set-based reference scorer used to cross-check `score_tractogram`.

use std::collections::{BTreeSet, HashSet};

use rltrack_core::field::{Mask, Phantom};
use rltrack_core::geometry::{Streamline, Vec3};

type V = (i64, i64, i64);

pub struct Brute {
    pub vc: usize,
    pub ic: usize,
    pub nc: usize,
    pub vb: usize,
    pub ib: usize,
    pub ol: Vec<f64>,
    pub or: Vec<f64>,
    pub f1: Vec<f64>,
}

fn set_of(m: &Mask) -> HashSet<V> {
    let [nx, ny, nz] = m.dims();
    let mut s = HashSet::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(x, y, z) {
                    s.insert((x as i64, y as i64, z as i64));
                }
            }
        }
    }
    s
}

fn vox(p: Vec3) -> V {
    (p.x.round() as i64, p.y.round() as i64, p.z.round() as i64)
}

pub fn brute_score(lines: &[Streamline], ph: &Phantom) -> Brute {
    let heads: Vec<HashSet<V>> = ph.bundles.iter().map(|b| set_of(&b.head)).collect();
    let tails: Vec<HashSet<V>> = ph.bundles.iter().map(|b| set_of(&b.tail)).collect();
    // region ids: 2b for a head, 2b + 1 for a tail
    let first_region = |v: &V| -> Option<usize> {
        (0..ph.bundles.len()).find_map(|b| {
            if heads[b].contains(v) {
                Some(2 * b)
            } else if tails[b].contains(v) {
                Some(2 * b + 1)
            } else {
                None
            }
        })
    };
    let (mut vc, mut ic, mut nc) = (0, 0, 0);
    let mut vb = BTreeSet::new();
    let mut ib = BTreeSet::new();
    let dims = ph.dims();
    let mut visited: Vec<HashSet<V>> = vec![HashSet::new(); ph.bundles.len()];
    for s in lines {
        let (a, e) = (vox(s.first()), vox(s.last()));
        let valid = (0..ph.bundles.len()).find(|&b| {
            (heads[b].contains(&a) && tails[b].contains(&e)) || (tails[b].contains(&a) && heads[b].contains(&e))
        });
        match (valid, first_region(&a), first_region(&e)) {
            (Some(b), _, _) => {
                vc += 1;
                vb.insert(b);
                let pts = s.points();
                let mut add = |p: Vec3| {
                    let v = vox(p);
                    if v.0 >= 0 && v.1 >= 0 && v.2 >= 0 && (v.0 as usize) < dims[0] && (v.1 as usize) < dims[1] && (v.2 as usize) < dims[2] {
                        visited[b].insert(v);
                    }
                };
                add(pts[0]);
                for w in pts.windows(2) {
                    let n = (w[0].distance(w[1]) / 0.125).ceil().max(1.0) as usize;
                    for k in 1..=n {
                        let t = k as f64 / n as f64;
                        add(w[0] + (w[1] - w[0]) * t);
                    }
                }
            }
            (None, Some(x), Some(y)) => {
                ic += 1;
                ib.insert((x.min(y), x.max(y)));
            }
            _ => nc += 1,
        }
    }
    let (mut ol, mut or, mut f1) = (vec![], vec![], vec![]);
    for (b, bundle) in ph.bundles.iter().enumerate() {
        let gt = set_of(&bundle.mask);
        let inter = visited[b].intersection(&gt).count() as f64;
        let g = gt.len() as f64;
        let v = visited[b].len() as f64;
        let p = if v > 0.0 { inter / v } else { 0.0 };
        let o = inter / g;
        ol.push(100.0 * o);
        or.push(100.0 * (v - inter) / g);
        f1.push(if o + p > 0.0 { 100.0 * 2.0 * o * p / (o + p) } else { 0.0 });
    }
    Brute {
        vc,
        ic,
        nc,
        vb: vb.len(),
        ib: ib.len(),
        ol,
        or,
        f1,
    }
}

/// Random mix of valid, cross-bundle, and non-connecting streamlines.
pub fn random_tractogram<R: rand::Rng>(ph: &Phantom, n: usize, rng: &mut R) -> Vec<Streamline> {
    let pick = |m: &Mask, rng: &mut R| -> Vec3 {
        let vs = m.voxels();
        let v = vs[rng.gen_range(0..vs.len())];
        Vec3::new(
            v[0] as f64 + rng.gen_range(-0.45..0.45),
            v[1] as f64 + rng.gen_range(-0.45..0.45),
            v[2] as f64 + rng.gen_range(-0.45..0.45),
        )
    };
    let dims = ph.dims();
    let nb = ph.bundles.len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let b = rng.gen_range(0..nb);
        let bundle = &ph.bundles[b];
        let s = match rng.gen_range(0..5) {
            0 | 1 => {
                let c = bundle.centroid.points();
                let mid = c[c.len() / 2];
                let mut pts = vec![pick(&bundle.head, rng), mid, pick(&bundle.tail, rng)];
                if rng.gen_bool(0.5) {
                    pts.reverse();
                }
                pts
            }
            2 => {
                let o = &ph.bundles[rng.gen_range(0..nb)];
                let end = if rng.gen_bool(0.5) { &o.head } else { &o.tail };
                vec![pick(&bundle.head, rng), pick(end, rng)]
            }
            3 => vec![pick(&bundle.head, rng), pick(&bundle.mask, rng)],
            _ => {
                let mut r = || Vec3::new(
                    rng.gen_range(0.0..dims[0] as f64 - 1.0),
                    rng.gen_range(0.0..dims[1] as f64 - 1.0),
                    rng.gen_range(0.0..dims[2] as f64 - 1.0),
                );
                vec![r(), r(), r()]
            }
        };
        out.push(Streamline::new(s).unwrap());
    }
    out
}
