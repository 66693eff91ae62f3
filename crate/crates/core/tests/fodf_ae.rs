use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rltrack_core::env::{Env, EnvConfig, StateMode, ENCODED_SIGNAL};
use rltrack_core::field::{make_phantom, Mask, PhantomSpec};
use rltrack_core::fodf_ae::*;
use rltrack_core::nn::{Mode, Tape, Tensor};
use rltrack_core::reward::RewardConfig;

fn small() -> AeConfig {
    AeConfig {
        c1: 8,
        c2: 8,
        batch_size: 16,
        lr: 3e-3,
        ..AeConfig::default()
    }
}

#[test]
fn latent_has_864_values() {
    let ph = make_phantom(&PhantomSpec::straight(16)).unwrap();
    let ae = FodfAe::new(AeConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = sample_patches(&ph, 2, &mut rng).unwrap();
    assert_eq!(p.len(), 2 * 20412);
    let z = ae.encode(&p, 2).unwrap();
    assert_eq!(z.len(), 2 * 864);
    assert_eq!(ENCODED_SIGNAL, LATENT_CHANNELS * LATENT_SIDE.pow(3));
    assert_eq!(compression_ratio(), 23.625);
    assert_eq!(ae.decode(&z, 2).unwrap().len(), p.len());
    assert!(ae.encode(&p[1..], 2).is_err());
    assert!(ae.decode(&z[1..], 2).is_err());
}

#[test]
fn zeroed_residual_block_is_identity() {
    let mut ae = FodfAe::new(small()).unwrap();
    let blocks: Vec<ResBlock> = ae.res_blocks().iter().map(|b| (*b).clone()).collect();
    let blk = &blocks[1];
    for id in [blk.conv1.w, blk.conv1.b, blk.conv2.w, blk.conv2.b] {
        ae.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<f32> = (0..3 * 8 * 27).map(|_| rng.gen_range(-2.0..2.0)).collect();
    for mode in [Mode::Eval, Mode::Train { seed: 3 }] {
        let mut tape = Tape::new();
        let mut bind = ae.store.bind(&mut tape, false, mode);
        let x = tape.constant(Tensor::new(vec![3, 8, 3, 3, 3], data.clone()).unwrap());
        let y = blk.forward(&mut tape, &mut bind, x).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }
}

#[test]
fn patches_must_be_centred_in_the_mask() {
    let ph = make_phantom(&PhantomSpec::straight(16)).unwrap();
    assert!(!ph.tracking_mask.contains_voxel([0, 0, 0]));
    assert!(patch_at(&ph, [0, 0, 0]).is_err());
    let v = ph.tracking_mask.voxels()[0];
    let p = patch_at(&ph, [v[0] as i64, v[1] as i64, v[2] as i64]).unwrap();
    assert_eq!(p.len(), PATCH_LEN);
    let mut empty = ph.clone();
    empty.tracking_mask = Mask::zeros(ph.dims());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_patches(&empty, 4, &mut rng).is_err());
    let mut ae = FodfAe::new(small()).unwrap();
    assert!(train_ae(&mut ae, &empty, 20, 1).is_err());
}

#[test]
fn training_beats_the_mean_patch_and_freezes() {
    let ph = make_phantom(&PhantomSpec::straight_and_arc(16)).unwrap();
    let mut ae = FodfAe::new(small()).unwrap();
    let r = train_ae(&mut ae, &ph, 400, 15).unwrap();
    assert_eq!((r.n_train, r.n_heldout), (360, 40));
    assert!(r.heldout_mse < r.baseline_mse, "{r:?}");
    let first = r.train_losses[0];
    let below = r.train_losses.iter().filter(|&&l| l <= first).count();
    assert!(below as f64 >= 0.8 * r.train_losses.len() as f64, "{r:?}");
    assert!(ae.is_frozen());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = sample_patches(&ph, 2, &mut rng).unwrap();
    assert!(ae.train_epoch(&p, 2).is_err());

    // eval encodings do not depend on batch composition
    let p = sample_patches(&ph, 5, &mut rng).unwrap();
    let all = ae.encode(&p, 5).unwrap();
    for i in 0..5 {
        let one = ae.encode(&p[i * PATCH_LEN..(i + 1) * PATCH_LEN], 1).unwrap();
        assert_eq!(one, all[i * 864..(i + 1) * 864]);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.nnck");
    ae.save(&path).unwrap();
    let back = FodfAe::load(&path).unwrap();
    assert!(back.is_frozen());
    assert_eq!(back.encode(&p, 5).unwrap(), all);
    assert_eq!(back.store.fingerprint(), ae.store.fingerprint());
}

#[test]
fn encoded_states_come_from_the_encoder() {
    let ph = make_phantom(&PhantomSpec::straight(16)).unwrap();
    let ae = FodfAe::new(small()).unwrap();
    let before = ae.store.fingerprint();
    let cfg = EnvConfig {
        state_mode: StateMode::Encoded,
        ..EnvConfig::default()
    };
    let env = Env::new(&ph, cfg.clone(), RewardConfig::default()).unwrap().with_encoder(&ae);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = env.reset(&mut rng).unwrap();
    let s = env.states(&batch, &[0]).unwrap();
    assert_eq!(s[0].len(), cfg.state_len());
    let c = batch.position(0).nearest_voxel();
    let z = ae.encode(&rltrack_core::env::extract_patch(&ph, c), 1).unwrap();
    assert_eq!(&s[0][..864], &z[..]);
    assert_eq!(ae.store.fingerprint(), before);
}
