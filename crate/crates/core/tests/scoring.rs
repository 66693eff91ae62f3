#[path = "support/brute_score.rs"]
mod brute_score;

use brute_score::{brute_score, random_tractogram};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rltrack_core::field::{make_phantom, PhantomSpec};
use rltrack_core::geometry::{Streamline, Vec3};
use rltrack_core::scoring::*;

#[test]
fn matches_brute_force_on_random_tractograms() {
    let ph = make_phantom(&PhantomSpec::straight_and_arc(24)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..50 {
        let n = 5 + case % 20;
        let lines = random_tractogram(&ph, n, &mut rng);
        let r = score_tractogram(&lines, &ph);
        let b = brute_score(&lines, &ph);
        let pct = |c: usize| 100.0 * c as f64 / n as f64;
        assert_eq!(r.n_streamlines, n);
        assert!((r.vc - pct(b.vc)).abs() < 1e-9);
        assert!((r.ic - pct(b.ic)).abs() < 1e-9);
        assert!((r.nc - pct(b.nc)).abs() < 1e-9);
        assert_eq!(r.vb, b.vb);
        assert_eq!(r.ib, b.ib);
        assert!((r.vc + r.ic + r.nc - 100.0).abs() < 1e-9);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((r.ol - mean(&b.ol)).abs() < 1e-9, "case {case}");
        assert!((r.or - mean(&b.or)).abs() < 1e-9);
        assert!((r.f1 - mean(&b.f1)).abs() < 1e-9);
        assert!((0.0..=100.0).contains(&r.f1));
    }
}

#[test]
fn hand_built_three_streamlines() {
    let ph = make_phantom(&PhantomSpec::straight_and_arc(32)).unwrap();
    let straight = ph.bundles[0].centroid.clone();
    let arc = ph.bundles[1].centroid.clone();
    let p = straight.points();
    let short = Streamline::new(vec![p[p.len() / 2], p[p.len() / 2 + 4]]).unwrap();
    let r = score_tractogram(&[straight.clone(), arc.reversed(), short], &ph);
    assert!((r.vc - 200.0 / 3.0).abs() < 1e-9);
    assert!((r.nc - 100.0 / 3.0).abs() < 1e-9);
    assert_eq!(r.ic, 0.0);
    assert_eq!((r.vb, r.ib), (2, 0));
    // head of one bundle to the tail of the other
    let h = ph.bundles[0].head.voxels()[0];
    let t = ph.bundles[1].tail.voxels()[0];
    let v = |a: [usize; 3]| Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64);
    let cross = Streamline::new(vec![v(h), v(t)]).unwrap();
    assert_eq!(classify(&cross, &ph), Connection::Invalid((0, RoiEnd::Head), (1, RoiEnd::Tail)));
    let r = score_tractogram(&[cross.clone(), cross], &ph);
    assert_eq!((r.ic, r.ib, r.vb), (100.0, 1, 0));
}

#[test]
fn ground_truth_bundle_scores_itself() {
    let ph = make_phantom(&PhantomSpec::straight(24)).unwrap();
    let b = &ph.bundles[0];
    // streamlines through every voxel of the bundle, parallel to the axis
    let mut lines = Vec::new();
    let c = b.centroid.points();
    let (first, last) = (c[0], c[c.len() - 1]);
    let vox = b.mask.voxels();
    let mut rows: Vec<(usize, usize)> = vox.iter().map(|v| (v[1], v[2])).collect();
    rows.sort();
    rows.dedup();
    for (y, z) in rows {
        let xs: Vec<usize> = vox.iter().filter(|v| v[1] == y && v[2] == z).map(|v| v[0]).collect();
        let (lo, hi) = (*xs.iter().min().unwrap() as f64, *xs.iter().max().unwrap() as f64);
        let (lo, hi) = (lo.min(first.x), hi.max(last.x));
        let s = Streamline::new(vec![Vec3::new(lo, y as f64, z as f64), Vec3::new(hi, y as f64, z as f64)]).unwrap();
        if matches!(classify(&s, &ph), Connection::Valid(_)) {
            lines.push(s);
        }
    }
    let r = score_tractogram(&lines, &ph);
    assert_eq!(r.vc, 100.0);
    assert!(r.ol > 95.0, "{r}");
    assert!(r.or < 5.0, "{r}");
    assert!(r.f1 > 95.0, "{r}");
}

#[test]
fn empty_and_permutation() {
    let ph = make_phantom(&PhantomSpec::straight_and_arc(24)).unwrap();
    let r = score_tractogram(&[], &ph);
    assert_eq!((r.vc, r.ic, r.nc, r.vb, r.ib, r.ol, r.f1), (0.0, 0.0, 0.0, 0, 0, 0.0, 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut lines = random_tractogram(&ph, 40, &mut rng);
    let a = score_tractogram(&lines, &ph);
    lines.shuffle(&mut rng);
    let b = score_tractogram(&lines, &ph);
    assert_eq!(a, b);
    // F1 is the harmonic mean of overlap and voxel precision
    for bs in &a.bundles {
        if bs.n_valid > 0 {
            let p = bs.ol / (bs.ol + bs.or);
            let ol = bs.ol / 100.0;
            assert!((bs.f1 / 100.0 - 2.0 * ol * p / (ol + p)).abs() < 1e-9);
        }
    }
    let text = a.to_string();
    assert!(text.contains("VC%") && text.contains("straight"));
}
