use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rltrack_core::env::*;
use rltrack_core::field::{make_phantom, KernelFitter, Mask, Phantom, PhantomSpec, ShVolume};
use rltrack_core::geometry::{Grid, Streamline, Vec3};
use rltrack_core::reward::{RewardConfig, StreamlineScorer};
use rltrack_core::Result;

/// 16-cube filled with x-aligned kernels, full tracking mask, given seeds.
fn open_phantom(seeds: &[[usize; 3]]) -> Phantom {
    let dims = [16; 3];
    let mut volume = ShVolume::zeros(dims);
    let c = KernelFitter::new(10.0).fit(Vec3::new(1.0, 0.0, 0.0));
    let mut tracking_mask = Mask::zeros(dims);
    for z in 0..16 {
        for y in 0..16 {
            for x in 0..16 {
                volume.coeffs_mut(x, y, z).copy_from_slice(&c);
                tracking_mask.set(x, y, z, true);
            }
        }
    }
    let mut seeding_mask = Mask::zeros(dims);
    for &[x, y, z] in seeds {
        seeding_mask.set(x, y, z, true);
    }
    let tracking_field = tracking_mask.to_grid();
    Phantom {
        volume,
        tracking_mask,
        seeding_mask,
        bundles: vec![],
        tracking_field,
    }
}

fn env(ph: &Phantom) -> Env<'_> {
    Env::new(ph, EnvConfig::default(), RewardConfig::default()).unwrap()
}

#[test]
fn ten_voxels_two_seeds_each() {
    let seeds: Vec<[usize; 3]> = (0..10).map(|i| [3 + i, 5, 5]).collect();
    let ph = open_phantom(&seeds);
    let e = env(&ph);
    let batch = e.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(batch.len(), 20);
    for i in 0..20 {
        let p = batch.position(i);
        let v = p.nearest_voxel();
        assert!(ph.seeding_mask.contains_voxel(v), "{p:?}");
        assert!(batch.history[i].is_empty());
    }
    let again = e.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(batch.points, again.points);
    let other = e.reset(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(batch.points, other.points);
}

#[test]
fn config_errors() {
    let ph = open_phantom(&[[5, 5, 5]]);
    let cfg = EnvConfig {
        npv: 0,
        ..EnvConfig::default()
    };
    assert!(matches!(Env::new(&ph, cfg, RewardConfig::default()), Err(rltrack_core::Error::Config(_))));
    assert!(seed_points(&ph, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    let empty = open_phantom(&[]);
    assert!(matches!(env(&empty).reset(&mut ChaCha8Rng::seed_from_u64(0)), Err(rltrack_core::Error::Config(_))));
    for bad in [
        EnvConfig { step_size: 0.0, ..EnvConfig::default() },
        EnvConfig { min_len: 300.0, ..EnvConfig::default() },
        EnvConfig { angle_max_deg: 90.0, ..EnvConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn normalized_step() {
    let ph = open_phantom(&[[5, 5, 5]]);
    let e = env(&ph);
    let mut b = ActorBatch::new(&[Vec3::new(5.0, 5.0, 5.0)]);
    let out = e.step(&mut b, &[[2.0, 0.0, 0.0]]).unwrap();
    assert_eq!(b.position(0), Vec3::new(5.5, 5.0, 5.0));
    assert!(!out.dones[0]);
    // aligned with the fiber and with itself on the first step
    assert!((out.rewards[0] - 1.0).abs() < 1e-9);
}

#[test]
fn angle_stop() {
    let ph = open_phantom(&[[5, 5, 5]]);
    let e = env(&ph);
    let mut b = ActorBatch::new(&[Vec3::new(5.0, 5.0, 5.0)]);
    e.step(&mut b, &[[1.0, 0.0, 0.0]]).unwrap();
    let out = e.step(&mut b, &[[1.0, 1.0, 0.0]]).unwrap();
    assert!(out.dones[0]);
    assert!(!b.alive[0]);
    assert_eq!(out.finished[0].reason, StopReason::Angle);
    assert_eq!(b.n_steps(0), 1);
    // 25 degrees is allowed
    let mut b = ActorBatch::new(&[Vec3::new(5.0, 5.0, 5.0)]);
    e.step(&mut b, &[[1.0, 0.0, 0.0]]).unwrap();
    let t = 25f64.to_radians();
    let out = e.step(&mut b, &[[t.cos(), t.sin(), 0.0]]).unwrap();
    assert!(!out.dones[0]);
}

#[test]
fn mask_threshold_stop() {
    let mut ph = open_phantom(&[[5, 5, 5]]);
    let mut g = Grid::zeros([16; 3], 1);
    g.data.iter_mut().for_each(|v| *v = 0.05);
    ph.tracking_field = g;
    let e = env(&ph);
    let mut b = ActorBatch::new(&[Vec3::new(5.0, 5.0, 5.0)]);
    let out = e.step(&mut b, &[[1.0, 0.0, 0.0]]).unwrap();
    assert!(out.dones[0]);
    assert_eq!(out.finished[0].reason, StopReason::Mask);
    assert!(out.finished[0].streamline.is_none());
    // leaving the volume also stops
    let ph = open_phantom(&[[5, 5, 5]]);
    let e = env(&ph);
    let mut b = ActorBatch::new(&[Vec3::new(15.2, 5.0, 5.0)]);
    let out = e.step(&mut b, &[[1.0, 0.0, 0.0]]).unwrap();
    assert!(out.dones[0]);
}

#[test]
fn zero_action_terminates() {
    let ph = open_phantom(&[[5, 5, 5]]);
    let e = env(&ph);
    let mut b = ActorBatch::new(&[Vec3::new(5.0, 5.0, 5.0), Vec3::new(6.0, 5.0, 5.0)]);
    let out = e.step(&mut b, &[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
    assert!(out.dones[0] && !out.dones[1]);
    assert_eq!(out.finished[0].reason, StopReason::ZeroAction);
    assert!(e.step(&mut b, &[[1.0, 0.0, 0.0]]).is_err());
}

struct Half;
impl StreamlineScorer for Half {
    fn score_batch(&self, s: &[Streamline]) -> Result<Vec<f64>> {
        Ok(s.iter().map(|l| if l.first().y > 6.0 { 1.0 } else { 0.0 }).collect())
    }
}

#[test]
fn lengths_and_bonus() {
    let ph = open_phantom(&[[1, 5, 5]]);
    let cfg = EnvConfig {
        max_len: 6.0,
        min_len: 3.0,
        ..EnvConfig::default()
    };
    let e = Env::new(&ph, cfg, RewardConfig::default()).unwrap().with_oracle(&Half);
    let starts = [Vec3::new(1.0, 5.0, 5.0), Vec3::new(1.0, 7.0, 5.0), Vec3::new(1.0, 9.0, 5.0)];
    let mut b = ActorBatch::new(&starts);
    let mut finished = vec![];
    let mut t = 0;
    while b.any_alive() {
        // actor 2 turns sharply after 2 steps: too short
        let acts: Vec<[f64; 3]> = (0..3)
            .map(|i| if i == 2 && t == 2 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] })
            .collect();
        let out = e.step(&mut b, &acts).unwrap();
        for f in &out.finished {
            assert_eq!(out.rewards[f.actor], out.rewards[f.actor].clamp(-1.0, 1.0) + f.bonus);
        }
        finished.extend(out.finished);
        t += 1;
    }
    finished.sort_by_key(|f| f.actor);
    assert_eq!(finished[0].reason, StopReason::MaxLength);
    assert!(finished[0].valid);
    assert_eq!(finished[0].bonus, 0.0);
    let len = finished[0].streamline.as_ref().unwrap().arc_length();
    assert!((len - 6.0).abs() < 1e-9);
    assert!(finished[1].valid);
    assert_eq!(finished[1].bonus, 10.0);
    assert!(!finished[2].valid);
    assert_eq!(finished[2].bonus, 0.0);
    for f in finished.iter().filter(|f| f.valid) {
        let l = f.streamline.as_ref().unwrap().arc_length();
        assert!(l >= 3.0 - 1e-9 && l <= 6.0 + 1e-9);
    }
}

#[test]
fn state_lengths_and_padding() {
    let ph = open_phantom(&[[5, 5, 5]]);
    let e = env(&ph);
    let mut b = ActorBatch::new(&[Vec3::new(5.0, 5.0, 5.0)]);
    let s = e.states(&b, &[0]).unwrap();
    assert_eq!(s[0].len(), 496);
    assert!(s[0][196..].iter().all(|&v| v == 0.0));
    let dirs = [[1.0, 0.0, 0.0], [1.0, 0.2, 0.0], [1.0, 0.2, 0.1]];
    for d in dirs {
        e.step(&mut b, &[d]).unwrap();
    }
    let s = &e.states(&b, &[0]).unwrap()[0];
    let rows: Vec<&[f32]> = s[196..].chunks(3).collect();
    assert_eq!(rows.len(), 100);
    assert_eq!(rows.iter().filter(|r| r.iter().any(|&v| v != 0.0)).count(), 3);
    assert!(rows[3..].iter().all(|r| r.iter().all(|&v| v == 0.0)));
    // most recent first
    let last = Vec3::from_slice(&dirs[2]).normalized().unwrap();
    assert!((rows[0][2] as f64 - last.z).abs() < 1e-6);
    assert_eq!(rows[2], &[1.0, 0.0, 0.0]);
    assert_eq!(EnvConfig { state_mode: StateMode::Encoded, ..EnvConfig::default() }.state_len(), 1164);
}

#[test]
fn local6_zero_fills_outside() {
    let ph = open_phantom(&[[5, 5, 5]]);
    let e = env(&ph);
    let s = e.local6(Vec3::new(0.0, 5.0, 5.0));
    assert_eq!(s.len(), 196);
    assert!(s[..28].iter().any(|&v| v != 0.0));
    // -x neighbour is outside
    assert!(s[56..84].iter().all(|&v| v == 0.0));
    assert_eq!(&s[..28], &s[28..56]);
}

struct SumEncoder;
impl PatchEncoder for SumEncoder {
    fn encode_patches(&self, patches: &[f32], n: usize) -> Result<Vec<f32>> {
        let per = patches.len() / n;
        Ok(patches
            .chunks(per)
            .flat_map(|p| {
                let s: f32 = p.iter().sum();
                (0..ENCODED_SIGNAL).map(move |k| s + k as f32)
            })
            .collect())
    }
}

#[test]
fn encoded_states() {
    let ph = open_phantom(&[[5, 5, 5]]);
    let cfg = EnvConfig {
        state_mode: StateMode::Encoded,
        ..EnvConfig::default()
    };
    let bare = Env::new(&ph, cfg.clone(), RewardConfig::default()).unwrap();
    let b = ActorBatch::new(&[Vec3::new(0.2, 0.0, 0.0), Vec3::new(8.0, 8.0, 8.0)]);
    assert!(bare.states(&b, &[0]).is_err());
    let e = bare.with_encoder(&SumEncoder);
    let s = e.states(&b, &[0, 1]).unwrap();
    assert_eq!(s[0].len(), 1164);
    // corner patch is mostly zero-filled
    let patch = extract_patch(&ph, [0, 0, 0]);
    assert_eq!(patch.len(), 28 * 729);
    let full = extract_patch(&ph, [8, 8, 8]);
    let sum = |p: &[f32]| p.iter().sum::<f32>();
    assert!((sum(&patch) * 729.0 / 125.0 - sum(&full)).abs() < 1e-2 * sum(&full).abs());
    assert_eq!(s[0][0], sum(&patch));
    assert_eq!(s[1][0], sum(&full));
}

fn rollout(ph: &Phantom, starts: &[Vec3], ids: &[usize], steps: usize) -> ActorBatch {
    let e = env(ph);
    let mut b = ActorBatch::new(starts);
    for t in 0..steps {
        let acts: Vec<[f64; 3]> = (0..starts.len())
            .map(|i| {
                let w = (t as f64 * 0.3 + ids[i] as f64).sin() * 0.3;
                [1.0, w, -w * 0.5]
            })
            .collect();
        e.step(&mut b, &acts).unwrap();
    }
    b
}

#[test]
fn batch_invariance_and_determinism() {
    let spec = PhantomSpec::straight(24);
    let ph = make_phantom(&spec).unwrap();
    let e = env(&ph);
    let seeds = e.reset(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let starts: Vec<Vec3> = (0..seeds.len()).map(|i| seeds.position(i)).collect();
    let ids: Vec<usize> = (0..starts.len()).collect();
    let all = rollout(&ph, &starts, &ids, 60);
    for i in [0, starts.len() / 2, starts.len() - 1] {
        let one = rollout(&ph, &starts[i..=i], &[i], 60);
        assert_eq!(one.points[0], all.points[i]);
    }
    let again = rollout(&ph, &starts, &ids, 60);
    assert_eq!(again.points, all.points);
    // alive actors stay inside the tracking mask
    for i in all.alive_indices() {
        assert!(ph.tracking_mask.contains_voxel(all.position(i).nearest_voxel()));
    }
}
