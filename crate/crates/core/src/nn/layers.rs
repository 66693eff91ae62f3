use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{Binding, BnUpdate, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Kaiming-uniform with `a = sqrt(5)`, i.e. `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn normal_init<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_param(&format!("{name}.weight"), kaiming_uniform(&[n_out, n_in], n_in, rng));
        let b = store.add_param(&format!("{name}.bias"), kaiming_uniform(&[n_out], n_in, rng));
        Linear { w, b, n_in, n_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding<T>, x: Var) -> Result<Var> {
        tape.linear(x, bind.var(self.w), Some(bind.var(self.b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add_param(&format!("{name}.weight"), Tensor::full(&[dim], T::one()));
        let beta = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding<T>, x: Var) -> Result<Var> {
        tape.layer_norm(
            x,
            Some(bind.var(self.gamma)),
            Some(bind.var(self.beta)),
            T::c(self.eps),
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    /// weight of the old running value in each update
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_param(&format!("{name}.weight"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            eps: 1e-5,
            momentum: 0.99,
        }
    }

    /// `x` is `[N, C, ..]`. Train mode normalizes by the batch moments and
    /// records them on the binding; eval mode uses the running buffers.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, x: Var) -> Result<Var> {
        let (g, b) = (bind.var(self.gamma), bind.var(self.beta));
        let eps = T::c(self.eps);
        if bind.is_train() {
            let count = tape.value(x).numel() / tape.shape(x).get(1).copied().unwrap_or(1);
            let (y, mean, var) = tape.batch_norm_train(x, g, b, eps)?;
            bind.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: mean,
                batch_var: var,
                count,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let rm = tape.value(bind.var(self.running_mean)).data().to_vec();
            let rv = tape.value(bind.var(self.running_var)).data().to_vec();
            tape.batch_norm_eval(x, g, b, &rm, &rv, eps)
        }
    }
}

/// Inverted dropout. Identity in eval mode or when `p == 0`.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, bind: &mut Binding<T>, x: Var, p: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout rate {p} not in [0, 1)")));
    }
    if !bind.is_train() || p == 0.0 {
        return Ok(x);
    }
    let keep = T::c(1.0 / (1.0 - p));
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<T> = (0..n)
        .map(|_| if bind.rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    None,
    Layer,
    Batch,
}

#[derive(Debug, Clone)]
enum Norm {
    Layer(LayerNorm),
    Batch(BatchNorm),
}

/// Hidden-layer options for [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub norm: NormKind,
    pub dropout: f64,
}

impl MlpConfig {
    pub fn plain(hidden: Vec<usize>) -> Self {
        MlpConfig {
            hidden,
            norm: NormKind::None,
            dropout: 0.0,
        }
    }
}

/// Fully connected network. Each hidden block is
/// Linear -> Dropout -> Norm -> ReLU; the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    blocks: Vec<(Linear, Option<Norm>)>,
    out: Linear,
    dropout: f64,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        cfg: &MlpConfig,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut d = n_in;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.{i}"), d, h, rng);
            let norm = match cfg.norm {
                NormKind::None => None,
                NormKind::Layer => Some(Norm::Layer(LayerNorm::new(store, &format!("{name}.{i}.ln"), h))),
                NormKind::Batch => Some(Norm::Batch(BatchNorm::new(store, &format!("{name}.{i}.bn"), h))),
            };
            blocks.push((lin, norm));
            d = h;
        }
        let out = Linear::new(store, &format!("{name}.out"), d, n_out, rng);
        Mlp {
            blocks,
            out,
            dropout: cfg.dropout,
        }
    }

    pub fn n_in(&self) -> usize {
        self.blocks.first().map(|b| b.0.n_in).unwrap_or(self.out.n_in)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, norm) in &self.blocks {
            h = lin.forward(tape, bind, h)?;
            h = dropout(tape, bind, h, self.dropout)?;
            h = match norm {
                None => h,
                Some(Norm::Layer(ln)) => ln.forward(tape, bind, h)?,
                Some(Norm::Batch(bn)) => bn.forward(tape, bind, h)?,
            };
            h = tape.relu(h);
        }
        self.out.forward(tape, bind, h)
    }
}

/// Multi-head self-attention with separate q/k/v/out projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model dim {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        })
    }

    /// `x: [B, S, E] -> [B, S, E]`
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding<T>, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, bind, x)?;
        let k = self.k.forward(tape, bind, x)?;
        let v = self.v.forward(tape, bind, x)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.out.forward(tape, bind, a)
    }
}

/// Fixed sinusoidal positional encoding, `[len, dim]`.
pub fn sinusoidal_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = T::c(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data).unwrap()
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k * k;
        Conv3d {
            w: store.add_param(&format!("{name}.weight"), kaiming_uniform(&[c_out, c_in, k, k, k], fan_in, rng)),
            b: store.add_param(&format!("{name}.bias"), kaiming_uniform(&[c_out], fan_in, rng)),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding<T>, x: Var) -> Result<Var> {
        tape.conv3d(x, bind.var(self.w), Some(bind.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // PyTorch computes fan_in of a transposed conv from weight dim 1
        let fan_in = c_out * k * k * k;
        ConvTranspose3d {
            w: store.add_param(&format!("{name}.weight"), kaiming_uniform(&[c_in, c_out, k, k, k], fan_in, rng)),
            b: store.add_param(&format!("{name}.bias"), kaiming_uniform(&[c_out], fan_in, rng)),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding<T>, x: Var) -> Result<Var> {
        tape.conv_transpose3d(x, bind.var(self.w), Some(bind.var(self.b)), self.stride, self.pad)
    }
}
