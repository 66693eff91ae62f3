use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rltrack_core::nn::checkpoint::{load_store, save_store};
use rltrack_core::nn::gradcheck::{check_all, check_op, OPS};
use rltrack_core::nn::*;
use rltrack_core::Error;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    let results = check_all(100, 1e-5).unwrap();
    assert_eq!(results.len(), OPS.len() * 100);
    let worst = results
        .iter()
        .max_by(|a, b| a.rel_error.partial_cmp(&b.rel_error).unwrap())
        .unwrap();
    assert!(worst.rel_error <= 1e-4, "worst case {worst:?}");
}

#[test]
fn gradcheck_is_seeded() {
    let a = check_op("attention", 7, 1e-5).unwrap();
    let b = check_op("attention", 7, 1e-5).unwrap();
    assert_eq!(a.rel_error, b.rel_error);
}

#[test]
fn identity_linear_is_identity() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let w = t.constant(eye);
    let b = t.constant(Tensor::zeros(&[3]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());
}

#[test]
fn half_squared_norm_gradient_is_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0 = rand_t(&mut rng, &[4, 5]);
    let x0 = rand_t(&mut rng, &[1, 5]);
    let mut t = Tape::new();
    let w = t.leaf(w0.clone());
    let x = t.constant(x0.clone());
    let y = t.linear(x, w, None).unwrap();
    let sq = t.square(y);
    let s = t.sum(sq);
    let loss = t.scale(s, 0.5);
    let mut g = t.backward(loss).unwrap();
    let gw = g.take(w).unwrap();
    // d/dW 1/2 |Wx|^2 = (Wx) x^T
    let wx: Vec<f64> = (0..4)
        .map(|i| (0..5).map(|j| w0.data()[i * 5 + j] * x0.data()[j]).sum())
        .collect();
    for i in 0..4 {
        for j in 0..5 {
            let expected = wx[i] * x0.data()[j];
            let h = 1e-5;
            let f = |d: f64| {
                let mut w1 = w0.clone();
                w1.data_mut()[i * 5 + j] += d;
                0.5 * (0..4)
                    .map(|r| (0..5).map(|c| w1.data()[r * 5 + c] * x0.data()[c]).sum::<f64>().powi(2))
                    .sum::<f64>()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert_relative_eq!(gw.data()[i * 5 + j], expected, max_relative = 1e-12, epsilon = 1e-14);
            assert_relative_eq!(gw.data()[i * 5 + j], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    match t.sub(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let msg = t.matmul(a, a).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::zeros(&[2]));
    assert!(t.backward(a).is_err());
}

#[test]
fn dropout_zero_rate_and_eval_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::<f64>::new();
    let x0 = rand_t(&mut rng, &[4, 8]);
    for mode in [Mode::Eval, Mode::Train { seed: 5 }] {
        let mut t = Tape::new();
        let mut b = store.bind(&mut t, false, mode);
        let x = t.constant(x0.clone());
        let y = dropout(&mut t, &mut b, x, 0.0).unwrap();
        assert_eq!(t.value(y), &x0);
    }
    let mut t = Tape::new();
    let mut b = store.bind(&mut t, false, Mode::Eval);
    let x = t.constant(x0.clone());
    let y = dropout(&mut t, &mut b, x, 0.5).unwrap();
    assert_eq!(t.value(y), &x0);
}

#[test]
fn dropout_masks_are_seeded() {
    let store = ParamStore::<f64>::new();
    let run = |seed| {
        let mut t = Tape::new();
        let mut b = store.bind(&mut t, false, Mode::Train { seed });
        let x = t.constant(Tensor::full(&[1000], 1.0));
        let y = dropout(&mut t, &mut b, x, 0.3).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
    let y = run(9);
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
    assert!((250..350).contains(&zeros), "{zeros}");
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
}

#[test]
fn batchnorm_standardized_input_passes_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, c) = (64, 3);
    let mut x0 = rand_t(&mut rng, &[n, c]);
    for ch in 0..c {
        let col: Vec<f64> = (0..n).map(|i| x0.data()[i * c + ch]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            x0.data_mut()[i * c + ch] = (col[i] - m) / v.sqrt();
        }
    }
    let mut store = ParamStore::<f64>::new();
    let mut bn = BatchNorm::new(&mut store, "bn", c);
    bn.eps = 1e-12;
    let mut t = Tape::new();
    let mut b = store.bind(&mut t, false, Mode::Train { seed: 0 });
    let x = t.constant(x0.clone());
    let y = bn.forward(&mut t, &mut b, x).unwrap();
    for (a, e) in t.value(y).data().iter().zip(x0.data()) {
        assert!((a - e).abs() < 1e-9);
    }
}

#[test]
fn batchnorm_joint_batch_uses_union_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = 4;
    let b1 = rand_t(&mut rng, &[5, c]);
    let mut b2 = rand_t(&mut rng, &[7, c]);
    b2.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 2.0);
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", c);
    let mut t = Tape::new();
    let mut bind = store.bind(&mut t, true, Mode::Train { seed: 0 });
    let x1 = t.constant(b1.clone());
    let x2 = t.constant(b2.clone());
    let x = t.concat(&[x1, x2], 0).unwrap();
    bn.forward(&mut t, &mut bind, x).unwrap();
    let (mean, var) = bind.batch_moments().remove(0);
    let all: Vec<f64> = b1.data().iter().chain(b2.data()).copied().collect();
    for ch in 0..c {
        let col: Vec<f64> = all.iter().skip(ch).step_by(c).copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!((mean[ch] - m).abs() < 1e-12);
        assert!((var[ch] - v).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_running_stats_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 2);
    for step in 0..50 {
        let mut t = Tape::new();
        let mut b = store.bind(&mut t, false, Mode::Train { seed: step });
        let mut x0 = rand_t(&mut rng, &[32, 2]);
        x0.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v + 1.0);
        let x = t.constant(x0);
        bn.forward(&mut t, &mut b, x).unwrap();
        store.apply_bn_updates(&mut b);
    }
    let rm = store.get(bn.running_mean).data().to_vec();
    // 50 updates at momentum 0.99 move the mean ~40% of the way to 1
    assert!(rm.iter().all(|&m| m > 0.25 && m < 0.55), "{rm:?}");

    let x0 = rand_t(&mut rng, &[3, 2]);
    let eval = || {
        let mut t = Tape::new();
        let mut b = store.bind(&mut t, false, Mode::Eval);
        let x = t.constant(x0.clone());
        let y = bn.forward(&mut t, &mut b, x).unwrap();
        t.value(y).clone()
    };
    assert_eq!(eval(), eval());
}

#[test]
fn batchnorm_train_rejects_single_sample() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    let mut t = Tape::new();
    let mut b = store.bind(&mut t, false, Mode::Train { seed: 0 });
    let x = t.constant(Tensor::zeros(&[1, 3]));
    assert!(bn.forward(&mut t, &mut b, x).is_err());
}

#[test]
fn layernorm_normalizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (r, d) = (rng.gen_range(1..6), rng.gen_range(2..40));
        let mut x0 = rand_t(&mut rng, &[r, d]);
        let s = rng.gen_range(0.1..10.0);
        x0.data_mut().iter_mut().for_each(|v| *v = *v * s + 3.0);
        let mut t = Tape::new();
        let x = t.constant(x0);
        let y = t.layer_norm(x, None, None, 1e-14).unwrap();
        for row in t.value(y).data().chunks(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
            assert!(m.abs() <= 1e-10, "{m}");
            assert!((v - 1.0).abs() <= 1e-8, "{v}");
        }
    }
}

/// Straightforward per-element attention.
fn naive_attention(q: &[f64], k: &[f64], v: &[f64], b: usize, s: usize, e: usize, heads: usize) -> Vec<f64> {
    let d = e / heads;
    let mut out = vec![0.0; b * s * e];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..s {
                let mut scores = vec![0.0; s];
                for j in 0..s {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += q[(bi * s + i) * e + h * d + c] * k[(bi * s + j) * e + h * d + c];
                    }
                    scores[j] = dot / (d as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|x| (x - mx).exp()).sum();
                for j in 0..s {
                    let w = (scores[j] - mx).exp() / z;
                    for c in 0..d {
                        out[(bi * s + i) * e + h * d + c] += w * v[(bi * s + j) * e + h * d + c];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (b, s, e, heads) = (2, 3, 8, 2);
    let (q0, k0, v0) = (rand_t(&mut rng, &[b, s, e]), rand_t(&mut rng, &[b, s, e]), rand_t(&mut rng, &[b, s, e]));
    let mut t = Tape::new();
    let (q, k, v) = (t.constant(q0.clone()), t.constant(k0.clone()), t.constant(v0.clone()));
    let y = t.attention(q, k, v, heads).unwrap();
    let expected = naive_attention(q0.data(), k0.data(), v0.data(), b, s, e, heads);
    for (a, e) in t.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() <= 1e-10);
    }
}

#[test]
fn attention_single_token_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut t = Tape::new();
    let q = t.constant(rand_t(&mut rng, &[1, 1, 4]));
    let k = t.constant(rand_t(&mut rng, &[1, 1, 4]));
    let v0 = rand_t(&mut rng, &[1, 1, 4]);
    let v = t.constant(v0.clone());
    let y = t.attention(q, k, v, 2).unwrap();
    assert_eq!(t.value(y), &v0);
}

#[test]
fn attention_uniform_queries_ignore_kv_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (s, e) = (5, 6);
    let k0 = rand_t(&mut rng, &[1, s, e]);
    let v0 = rand_t(&mut rng, &[1, s, e]);
    let perm = [3, 0, 4, 1, 2];
    let permute = |x: &Tensor<f64>| {
        let mut d = Vec::new();
        for &p in &perm {
            d.extend_from_slice(&x.data()[p * e..(p + 1) * e]);
        }
        Tensor::new(vec![1, s, e], d).unwrap()
    };
    let run = |k0: Tensor<f64>, v0: Tensor<f64>| {
        let mut t = Tape::new();
        let q = t.constant(Tensor::full(&[1, s, e], 0.3));
        let k = t.constant(k0);
        let v = t.constant(v0);
        let y = t.attention(q, k, v, 3).unwrap();
        t.value(y).clone()
    };
    let a = run(k0.clone(), v0.clone());
    let b = run(permute(&k0), permute(&v0));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 6]));
    assert!(matches!(t.attention(x, x, x, 4), Err(Error::Config(_))));
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "l", 4, 3, &mut rng);
    let before = store.clone();
    let grads: Vec<_> = store.ids().map(|id| Some(Tensor::zeros(store.get(id).shape()))).collect();
    let mut opt = Adam::new(5e-4);
    for _ in 0..10 {
        opt.step(&mut store, &grads).unwrap();
    }
    assert_eq!(store.get(lin.w), before.get(lin.w));
    assert_eq!(store.get(lin.b), before.get(lin.b));
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add_param("p", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let grads = vec![Some(Tensor::from_f64(&[3], &[0.5, -2.0, 0.0]).unwrap())];
    let mut opt = Adam::new(0.1);
    opt.step(&mut store, &grads).unwrap();
    let v = store.get(p).data();
    assert_relative_eq!(v[0], 0.9, epsilon = 1e-6);
    assert_relative_eq!(v[1], 2.1, epsilon = 1e-6);
    assert_eq!(v[2], 3.0);
}

#[test]
fn adam_fits_linear_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f32>::new();
    let lin = Linear::new(&mut store, "l", 3, 1, &mut rng);
    let true_w = [0.5f32, -1.0, 2.0];
    let mut opt = Adam::new(0.05);
    let mut last = f32::MAX;
    for _ in 0..300 {
        let xs: Vec<f32> = (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f32> = xs.chunks(3).map(|r| r.iter().zip(&true_w).map(|(a, b)| a * b).sum::<f32>() + 0.3).collect();
        let mut t = Tape::new();
        let b = store.bind(&mut t, true, Mode::Eval);
        let x = t.constant(Tensor::new(vec![32, 3], xs).unwrap());
        let y = t.constant(Tensor::new(vec![32, 1], ys).unwrap());
        let p = lin.forward(&mut t, &b, x).unwrap();
        let loss = t.mse(p, y).unwrap();
        last = t.value(loss).item();
        let mut g = t.backward(loss).unwrap();
        let grads = b.grads(&mut g);
        opt.step(&mut store, &grads).unwrap();
    }
    assert!(last < 1e-4, "{last}");
}

#[test]
fn polyak_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut a = ParamStore::<f64>::new();
    Linear::new(&mut a, "l", 3, 2, &mut rng);
    let mut b = ParamStore::<f64>::new();
    Linear::new(&mut b, "l", 3, 2, &mut rng);
    let b0 = b.clone();
    b.polyak_from(&a, 0.0).unwrap();
    assert_eq!(b.fingerprint(), b0.fingerprint());
    b.polyak_from(&a, 1.0).unwrap();
    assert_eq!(b.fingerprint(), a.fingerprint());
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f32>::new();
    let cfg = MlpConfig {
        hidden: vec![5, 4],
        norm: NormKind::Batch,
        dropout: 0.0,
    };
    Mlp::new(&mut store, "m", 3, 2, &cfg, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_store(&path, &store).unwrap();
    let mut other = ParamStore::<f32>::new();
    Mlp::new(&mut other, "m", 3, 2, &cfg, &mut ChaCha8Rng::seed_from_u64(99));
    assert_ne!(other.fingerprint(), store.fingerprint());
    load_store(&path, &mut other).unwrap();
    assert_eq!(other.fingerprint(), store.fingerprint());

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"NNCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, store.len());

    let mut wrong = ParamStore::<f32>::new();
    Mlp::new(&mut wrong, "m", 3, 2, &MlpConfig::plain(vec![5]), &mut rng);
    assert!(load_store(&path, &mut wrong).is_err());
}

#[test]
fn kaiming_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t: Tensor<f64> = kaiming_uniform(&[64, 100], 100, &mut rng);
    assert!(t.data().iter().all(|v| v.abs() <= 0.1));
    let max = t.data().iter().cloned().fold(0.0, |a: f64, b| a.max(b.abs()));
    assert!(max > 0.09);
}

#[test]
fn sinusoidal_encoding_layout() {
    let pe: Tensor<f64> = sinusoidal_encoding(4, 6);
    assert_eq!(pe.shape(), &[4, 6]);
    assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_relative_eq!(pe.data()[6], 1f64.sin());
    assert_relative_eq!(pe.data()[7], 1f64.cos());
}

#[test]
fn conv3d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (c, co, k, s, p) = (2, 3, 3, 2, 1);
    let dims = [5, 4, 6];
    let x0 = rand_t(&mut rng, &[1, c, dims[0], dims[1], dims[2]]);
    let w0 = rand_t(&mut rng, &[co, c, k, k, k]);
    let b0 = rand_t(&mut rng, &[co]);
    let mut t = Tape::new();
    let (x, w, b) = (t.constant(x0.clone()), t.constant(w0.clone()), t.constant(b0.clone()));
    let y = t.conv3d(x, w, Some(b), s, p).unwrap();
    let out = t.shape(y).to_vec();
    assert_eq!(out, vec![1, co, 3, 2, 3]);
    let xi = |ci: usize, d: isize, h: isize, ww: isize| -> f64 {
        if d < 0 || h < 0 || ww < 0 || d >= dims[0] as isize || h >= dims[1] as isize || ww >= dims[2] as isize {
            return 0.0;
        }
        x0.data()[((ci * dims[0] + d as usize) * dims[1] + h as usize) * dims[2] + ww as usize]
    };
    let yv = t.value(y).data();
    for o in 0..co {
        for od in 0..out[2] {
            for oh in 0..out[3] {
                for ow in 0..out[4] {
                    let mut acc = b0.data()[o];
                    for ci in 0..c {
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let wv = w0.data()[(((o * c + ci) * k + kd) * k + kh) * k + kw];
                                    acc += wv
                                        * xi(
                                            ci,
                                            (od * s + kd) as isize - p as isize,
                                            (oh * s + kh) as isize - p as isize,
                                            (ow * s + kw) as isize - p as isize,
                                        );
                                }
                            }
                        }
                    }
                    let got = yv[((o * out[2] + od) * out[3] + oh) * out[4] + ow];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> with shared weights and no bias
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (c, co, k, s, p) = (2, 3, 3, 2, 1);
    let x0 = rand_t(&mut rng, &[1, c, 5, 5, 5]);
    let w0 = rand_t(&mut rng, &[co, c, k, k, k]);
    let mut t = Tape::new();
    let (x, w) = (t.constant(x0.clone()), t.constant(w0));
    let y = t.conv3d(x, w, None, s, p).unwrap();
    let y0 = rand_t(&mut rng, t.shape(y));
    let lhs: f64 = t.value(y).data().iter().zip(y0.data()).map(|(a, b)| a * b).sum();
    let yv = t.constant(y0);
    let xt = t.conv_transpose3d(yv, w, None, s, p).unwrap();
    assert_eq!(t.shape(xt), x0.shape());
    let rhs: f64 = t.value(xt).data().iter().zip(x0.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}
