//! Central finite-difference checks for every differentiable tape op.
//!
//! Each case draws random shapes and values, reduces the op output to a
//! scalar with a random weighting, and compares the tape gradient of every
//! input against `(L(x + h) - L(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub const OPS: &[&str] = &[
    "linear",
    "linear_nobias",
    "matmul",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "mul_broadcast",
    "minimum",
    "scale",
    "add_scalar",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "square",
    "clamp",
    "sum",
    "mean",
    "sum_last",
    "mse",
    "concat",
    "slice",
    "reshape",
    "tile0",
    "layer_norm",
    "batch_norm_train",
    "batch_norm_eval",
    "attention",
    "conv3d",
    "conv_transpose3d",
];

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: &'static str,
    pub seed: u64,
    /// `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` over all input elements
    pub rel_error: f64,
    pub n_elements: usize,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, so kinks at 0 are never straddled by `h`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_shape(rng: &mut ChaCha8Rng, max_rank: usize, max_dim: usize) -> Vec<usize> {
    let rank = rng.gen_range(1..=max_rank);
    (0..rank).map(|_| rng.gen_range(1..=max_dim)).collect()
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Build) {
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, -1.5, 1.5);
    match op {
        "linear" | "linear_nobias" => {
            let (i, o) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let mut xs = rand_shape(rng, 2, 4);
            xs.push(i);
            let mut inputs = vec![u(rng, &xs), u(rng, &[o, i])];
            if op == "linear" {
                inputs.push(u(rng, &[o]));
                (inputs, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))
            } else {
                (inputs, Box::new(|t, v| t.linear(v[0], v[1], None)))
            }
        }
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
            (vec![u(rng, &[m, k]), u(rng, &[k, n])], Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        "add" | "sub" | "mul" => {
            let s = rand_shape(rng, 3, 4);
            let inputs = vec![u(rng, &s), u(rng, &s)];
            let b: Build = match op {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (inputs, b)
        }
        "add_broadcast" | "mul_broadcast" => {
            let s = rand_shape(rng, 3, 3);
            let mut full = rand_shape(rng, 2, 3);
            full.extend_from_slice(&s);
            let inputs = vec![u(rng, &full), u(rng, &s)];
            let b: Build = if op == "add_broadcast" {
                Box::new(|t, v| t.add(v[0], v[1]))
            } else {
                Box::new(|t, v| t.mul_broadcast(v[0], v[1]))
            };
            (inputs, b)
        }
        "minimum" => {
            let s = rand_shape(rng, 3, 4);
            let a = u(rng, &s);
            // keep |a - b| >= 0.05 so the selection never flips under h
            let off = away_from_zero(rng, &s);
            let b_data = a.data().iter().zip(off.data()).map(|(x, o)| x + o).collect();
            let b = Tensor::new(s.clone(), b_data).unwrap();
            (vec![a, b], Box::new(|t, v| t.minimum(v[0], v[1])))
        }
        "scale" => {
            let s = rand_shape(rng, 3, 4);
            let c = rng.gen_range(-2.0..2.0);
            (vec![u(rng, &s)], Box::new(move |t, v| Ok(t.scale(v[0], c))))
        }
        "add_scalar" => {
            let s = rand_shape(rng, 3, 4);
            let c = rng.gen_range(-2.0..2.0);
            (vec![u(rng, &s)], Box::new(move |t, v| Ok(t.add_scalar(v[0], c))))
        }
        "relu" => {
            let s = rand_shape(rng, 3, 4);
            (vec![away_from_zero(rng, &s)], Box::new(|t, v| Ok(t.relu(v[0]))))
        }
        "tanh" | "sigmoid" | "exp" | "softplus" | "square" => {
            let s = rand_shape(rng, 3, 4);
            let b: Build = match op {
                "tanh" => Box::new(|t, v| Ok(t.tanh(v[0]))),
                "sigmoid" => Box::new(|t, v| Ok(t.sigmoid(v[0]))),
                "exp" => Box::new(|t, v| Ok(t.exp(v[0]))),
                "softplus" => Box::new(|t, v| Ok(t.softplus(v[0]))),
                _ => Box::new(|t, v| Ok(t.square(v[0]))),
            };
            (vec![rand_tensor(rng, &s, -3.0, 3.0)], b)
        }
        "log" => {
            let s = rand_shape(rng, 3, 4);
            (vec![rand_tensor(rng, &s, 0.3, 3.0)], Box::new(|t, v| Ok(t.log(v[0]))))
        }
        "clamp" => {
            let s = rand_shape(rng, 3, 4);
            // values within 0.05 of the bounds +-1 are nudged away
            let mut x = rand_tensor(rng, &s, -2.0, 2.0);
            for v in x.data_mut() {
                if (v.abs() - 1.0).abs() < 0.05 {
                    *v += 0.1 * v.signum();
                }
            }
            (vec![x], Box::new(|t, v| Ok(t.clamp(v[0], -1.0, 1.0))))
        }
        "sum" | "mean" | "sum_last" => {
            let s = rand_shape(rng, 3, 4);
            let b: Build = match op {
                "sum" => Box::new(|t, v| Ok(t.sum(v[0]))),
                "mean" => Box::new(|t, v| Ok(t.mean(v[0]))),
                _ => Box::new(|t, v| Ok(t.sum_last(v[0]))),
            };
            (vec![u(rng, &s)], b)
        }
        "mse" => {
            let s = rand_shape(rng, 3, 4);
            (vec![u(rng, &s), u(rng, &s)], Box::new(|t, v| t.mse(v[0], v[1])))
        }
        "concat" => {
            let s = rand_shape(rng, 3, 3);
            let axis = rng.gen_range(0..s.len());
            let k = rng.gen_range(2..=3);
            let inputs: Vec<_> = (0..k)
                .map(|_| {
                    let mut si = s.clone();
                    si[axis] = rng.gen_range(1..=3);
                    u(rng, &si)
                })
                .collect();
            (inputs, Box::new(move |t, v| t.concat(v, axis)))
        }
        "slice" => {
            let mut s = rand_shape(rng, 3, 4);
            let axis = rng.gen_range(0..s.len());
            s[axis] += 1;
            let start = rng.gen_range(0..s[axis] - 1);
            let end = rng.gen_range(start + 1..=s[axis]);
            (vec![u(rng, &s)], Box::new(move |t, v| t.slice(v[0], axis, start, end)))
        }
        "reshape" => {
            let (a, b) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            (vec![u(rng, &[a, b])], Box::new(move |t, v| t.reshape(v[0], &[b, a])))
        }
        "tile0" => {
            let s = rand_shape(rng, 2, 3);
            let n = rng.gen_range(1..=3);
            (vec![u(rng, &s)], Box::new(move |t, v| Ok(t.tile0(v[0], n))))
        }
        "layer_norm" => {
            let (r, d) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
            let inputs = vec![u(rng, &[r, d]), u(rng, &[d]), u(rng, &[d])];
            (inputs, Box::new(|t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)))
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mut s = vec![rng.gen_range(2..=4), rng.gen_range(1..=3)];
            if rng.gen_bool(0.5) {
                s.push(rng.gen_range(1..=3));
            }
            let c = s[1];
            let inputs = vec![u(rng, &s), u(rng, &[c]), u(rng, &[c])];
            if op == "batch_norm_train" {
                (inputs, Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)))
            } else {
                let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
                (
                    inputs,
                    Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
                )
            }
        }
        "attention" => {
            let (b, s) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
            let heads = rng.gen_range(1..=2);
            let e = heads * rng.gen_range(1..=3);
            let inputs = (0..3).map(|_| u(rng, &[b, s, e])).collect();
            (inputs, Box::new(move |t, v| t.attention(v[0], v[1], v[2], heads)))
        }
        "conv3d" => {
            let (n, c, co) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2));
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1).min(k - 1);
            let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(k.max(2)..=k + 2)).collect();
            let inputs = vec![
                u(rng, &[n, c, dims[0], dims[1], dims[2]]),
                u(rng, &[co, c, k, k, k]),
                u(rng, &[co]),
            ];
            (inputs, Box::new(move |t, v| t.conv3d(v[0], v[1], Some(v[2]), stride, pad)))
        }
        "conv_transpose3d" => {
            let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2));
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1).min(k - 1);
            let lo = 1 + pad;
            let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(lo..=3)).collect();
            let inputs = vec![
                u(rng, &[n, ci, dims[0], dims[1], dims[2]]),
                u(rng, &[ci, co, k, k, k]),
                u(rng, &[co]),
            ];
            (inputs, Box::new(move |t, v| t.conv_transpose3d(v[0], v[1], Some(v[2]), stride, pad)))
        }
        other => panic!("no gradient check defined for op {other}"),
    }
}

fn weighted_loss(
    build: &Build,
    inputs: &[Tensor<f64>],
    weights: Option<&Tensor<f64>>,
    grad: bool,
) -> Result<(Tape<f64>, Vec<Var>, Var, Tensor<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| if grad { tape.leaf(x.clone()) } else { tape.constant(x.clone()) })
        .collect();
    let out = build(&mut tape, &vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => Tensor::full(tape.shape(out), 1.0),
    };
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss, w))
}

/// Runs one random case of `op` with step `h`.
pub fn check_op(op: &'static str, seed: u64, h: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, build) = case(op, &mut rng);

    let (_, _, _, ones) = weighted_loss(&build, &inputs, None, false)?;
    let weights = rand_tensor(&mut rng, ones.shape(), -1.0, 1.0);

    let (tape, vars, loss, _) = weighted_loss(&build, &inputs, Some(&weights), true)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| match grads.take(v) {
            Some(g) => g.into_data(),
            None => vec![0.0; x.numel()],
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, loss, _) = weighted_loss(&build, xs, Some(&weights), false)?;
        Ok(tape.value(loss).item())
    };
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut count = 0;
    let mut xs = inputs.clone();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[i][j];
            diff2 += (an - fd).powi(2);
            a2 += an * an;
            n2 += fd * fd;
            count += 1;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    let rel_error = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
    Ok(CheckResult {
        op,
        seed,
        rel_error,
        n_elements: count,
    })
}

/// `cases` random checks of every op in [`OPS`].
pub fn check_all(cases: usize, h: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(OPS.len() * cases);
    for (k, op) in OPS.iter().enumerate() {
        for c in 0..cases {
            out.push(check_op(op, (k * 100_003 + c) as u64, h)?);
        }
    }
    Ok(out)
}
