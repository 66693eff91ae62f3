use std::io::Cursor;

use proptest::prelude::*;
use rltrack_core::config::{ExperimentConfig, PhantomPreset};
use rltrack_core::field::{make_phantom, Mask, PhantomSpec, ShVolume};
use rltrack_core::geometry::{Grid, Streamline, Vec3};
use rltrack_core::io::*;
use rltrack_core::oracle::Split;
use rltrack_core::Error;

fn tract_bytes(t: &Tractogram) -> Vec<u8> {
    let mut b = Vec::new();
    write_tractogram(&mut b, t).unwrap();
    b
}

fn streamline_strategy() -> impl Strategy<Value = Streamline> {
    prop::collection::vec(prop::array::uniform3(-1e4f64..1e4), 2..12)
        .prop_map(|pts| Streamline::new(pts.into_iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()).unwrap())
}

fn channel_strategy(n: usize) -> impl Strategy<Value = Channel> {
    let split = prop_oneof![Just(Split::Train), Just(Split::Val), Just(Split::Test)];
    prop_oneof![
        Just(Channel::None),
        prop::collection::vec(any::<bool>(), n).prop_map(Channel::Labels),
        prop::collection::vec(-1e3f32..1e3, n).prop_map(Channel::Scores),
        prop::collection::vec((any::<bool>(), split), n).prop_map(Channel::Labeled),
    ]
}

fn tractogram_strategy() -> impl Strategy<Value = Tractogram> {
    prop::collection::vec(streamline_strategy(), 0..8).prop_flat_map(|lines| {
        let n = lines.len();
        channel_strategy(n).prop_map(move |channel| Tractogram {
            streamlines: lines.clone(),
            channel,
        })
    })
}

proptest! {
    #[test]
    fn tractogram_round_trip(t in tractogram_strategy()) {
        let bytes = tract_bytes(&t);
        let back = read_tractogram(&mut Cursor::new(&bytes)).unwrap();
        prop_assert_eq!(back.streamlines.len(), t.streamlines.len());
        for (a, b) in t.streamlines.iter().zip(&back.streamlines) {
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.points().iter().zip(b.points()) {
                for (x, y) in p.to_array().iter().zip(q.to_array()) {
                    prop_assert_eq!(*x as f32, y as f32);
                    prop_assert_eq!(y, (*x as f32) as f64);
                }
            }
        }
        prop_assert_eq!(&back.channel, &t.channel);
        // a second pass is bit-identical
        prop_assert_eq!(tract_bytes(&back), bytes);
    }

    #[test]
    fn mask_round_trip(dims in prop::array::uniform3(1usize..6), seed in any::<u64>()) {
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<u8> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let m = Mask::from_data(dims, data).unwrap();
        let mut b = Vec::new();
        write_mask(&mut b, &m).unwrap();
        prop_assert_eq!(b.len(), 16 + n);
        prop_assert_eq!(read_mask(&mut Cursor::new(&b)).unwrap(), m);
    }

    #[test]
    fn volume_round_trip(dims in prop::array::uniform3(1usize..4), vals in prop::collection::vec(-10f32..10.0, 28)) {
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f64> = (0..n * 28).map(|i| vals[i % 28] as f64 * (1.0 + i as f64 / 7.0)).map(|v| v as f32 as f64).collect();
        let vol = ShVolume::from_grid(Grid { dims, channels: 28, data }, 6).unwrap();
        let mut b = Vec::new();
        write_volume(&mut b, &vol).unwrap();
        prop_assert_eq!(b.len(), 4 + 12 + 4 + n * 28 * 4);
        let back = read_volume(&mut Cursor::new(&b)).unwrap();
        prop_assert_eq!(back, vol);
    }
}

#[test]
fn volume_header_layout() {
    let mut vol = ShVolume::zeros([3, 2, 1]);
    vol.coeffs_mut(1, 0, 0)[0] = 1.5;
    let mut b = Vec::new();
    write_volume(&mut b, &vol).unwrap();
    assert_eq!(&b[..4], b"SHV1");
    assert_eq!(&b[4..16], &[3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
    assert_eq!(&b[16..20], &[6, 0, 28, 0]);
    assert_eq!(b.len(), 20 + 6 * 28 * 4);
    // x-fastest: voxel (1, 0, 0) is the second record
    let off = 20 + 28 * 4;
    assert_eq!(f32::from_le_bytes(b[off..off + 4].try_into().unwrap()), 1.5);
}

#[test]
fn tractogram_layout_and_errors() {
    let s = Streamline::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]).unwrap();
    let t = Tractogram::new(vec![s.clone()]);
    let b = tract_bytes(&t);
    assert_eq!(&b[..4], b"TRX0");
    assert_eq!(&b[4..8], &1u32.to_le_bytes());
    assert_eq!(&b[8..12], &2u32.to_le_bytes());
    assert_eq!(b.len(), 12 + 6 * 4 + 1);
    assert_eq!(*b.last().unwrap(), 0);

    let empty = tract_bytes(&Tractogram::default());
    assert_eq!(read_tractogram(&mut Cursor::new(&empty)).unwrap(), Tractogram::default());

    let mut bad = b.clone();
    bad[0] = b'X';
    assert!(matches!(read_tractogram(&mut Cursor::new(&bad)), Err(Error::Format(_))));
    let mut trailing = b.clone();
    trailing.push(0);
    assert!(matches!(read_tractogram(&mut Cursor::new(&trailing)), Err(Error::Format(_))));
    assert!(matches!(read_tractogram(&mut Cursor::new(&b[..b.len() - 3])), Err(Error::Io(_))));
    let mut one_point = b.clone();
    one_point[8] = 1;
    assert!(read_tractogram(&mut Cursor::new(&one_point)).is_err());
    let mismatched = Tractogram {
        streamlines: vec![s],
        channel: Channel::Labels(vec![true, false]),
    };
    assert!(write_tractogram(&mut Vec::new(), &mismatched).is_err());
}

#[test]
fn phantom_directory_round_trip() {
    let spec = PhantomSpec::straight_and_arc(20);
    let ph = make_phantom(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_phantom(dir.path(), &ph, Some(&spec)).unwrap();
    let back = load_phantom(dir.path()).unwrap();
    assert_eq!(back.tracking_mask, ph.tracking_mask);
    assert_eq!(back.seeding_mask, ph.seeding_mask);
    assert_eq!(back.bundles.len(), 2);
    for (a, b) in ph.bundles.iter().zip(&back.bundles) {
        assert_eq!(a.name, b.name);
        assert_eq!((&a.mask, &a.head, &a.tail), (&b.mask, &b.head, &b.tail));
        assert_eq!(a.centroid, b.centroid);
    }
    let g = ph.volume.grid();
    for (x, y) in g.data.iter().zip(&back.volume.grid().data) {
        assert_eq!(*x as f32 as f64, *y);
    }
    // saving the loaded phantom again gives identical files
    let dir2 = tempfile::tempdir().unwrap();
    save_phantom(dir2.path(), &back, Some(&spec)).unwrap();
    for name in ["volume.shv", "tracking.msk", "bundle1_tail.msk", "phantom.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(dir2.path().join(name)).unwrap()
        );
    }
}

#[test]
fn labeled_set_file() {
    let data = rltrack_core::synth::labeled_set(40, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("set.trx");
    save_labeled(&p, &data).unwrap();
    let back = load_labeled(&p).unwrap();
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.splits, data.splits);
    save_tractogram(&p, &Tractogram::new(data.streamlines.clone())).unwrap();
    assert!(load_labeled(&p).is_err());
}

#[test]
fn config_parsing() {
    let text = r#"
[experiment]
name = "demo"
seed = 7

[phantom]
preset = "straight"
size = 24

[agent]
algorithm = "crossq"
hidden = [64, 64]

[irt]
n_iters = 3
"#;
    let c = ExperimentConfig::from_toml(text).unwrap();
    assert_eq!(c.experiment.seed, 7);
    assert_eq!(c.phantom.preset, PhantomPreset::Straight);
    assert_eq!(c.agent.hidden, vec![64, 64]);
    assert_eq!(c.irt.n_iters, 3);
    assert_eq!(c.env.step_size, 0.5);
    assert_eq!(c.phantom.spec().dims, [24; 3]);
    let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);

    let seeded = c.clone().with_seed(99);
    assert_eq!((seeded.agent.seed, seeded.oracle.seed, seeded.irt.seed), (99, 99, 99));

    for bad in [
        "[agent]\nlearning_rate = 0.1\n",
        "[nonsense]\nx = 1\n",
        "[env]\nangle_max_deg = 120.0\n",
        "[phantom]\npreset = \"spiral\"\n",
    ] {
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
    }
    let desk = ExperimentConfig::default().desk_overrides_in_effect();
    assert!(desk.contains(&"agent.hidden") && desk.contains(&"irt.dataset_cap"));
    assert!(ExperimentConfig::published_scale().desk_overrides_in_effect().is_empty());
}

fn leaves(v: &serde_json::Value, prefix: String, out: &mut Vec<(String, serde_json::Value)>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(x, key, out);
            }
        }
        x => out.push((prefix, x.clone())),
    }
}

#[test]
fn track_to_learn_differs_in_three_keys() {
    let base = ExperimentConfig::default();
    let ttl = base.clone().track_to_learn();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    leaves(&serde_json::to_value(&base).unwrap(), String::new(), &mut a);
    leaves(&serde_json::to_value(&ttl).unwrap(), String::new(), &mut b);
    let diff: Vec<(String, serde_json::Value)> =
        b.into_iter().filter(|x| !a.contains(x)).collect();
    let keys: Vec<&str> = diff.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(keys, ["agent.gamma", "env.n_dirs", "reward.oracle_bonus"]);
    assert_eq!(diff[0].1, serde_json::json!(0.75));
    assert_eq!(diff[1].1, serde_json::json!(4));
    assert_eq!(diff[2].1, serde_json::json!(0.0));
}
