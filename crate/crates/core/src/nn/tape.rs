//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse, so node order is already a topological order.

use super::conv::{col2im, im2col, ConvGeom};
use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl NormLayout {
    fn count(&self) -> usize {
        self.outer * self.inner
    }

    #[inline]
    fn channel_of(&self, i: usize) -> usize {
        (i / self.inner) % self.channels
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Minimum(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Tile0(Var),
    Norm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        layout: NormLayout,
        mean: Vec<T>,
        rstd: Vec<T>,
        /// batch statistics depend on `x` (train-mode batch norm, layer norm)
        stats_from_input: bool,
    },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `x W^T + b` for `x: [.., in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("linear bias", self.shape(b), &[ws[0]]));
            }
        }
        let (o, i) = (ws[0], ws[1]);
        let n = self.value(x).numel() / i;
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), n, i),
            MatRef::new(self.value(w).data(), o, i).t(),
            beta,
            &mut out,
            o,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, &parents))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); sa[0] * sb[1]];
        gemm(
            T::one(),
            MatRef::new(self.value(a).data(), sa[0], sa[1]),
            MatRef::new(self.value(b).data(), sb[0], sb[1]),
            T::zero(),
            &mut out,
            sb[1],
        );
        Ok(self.push(Tensor::new(vec![sa[0], sb[1]], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum. `b` may also have a shape equal to a suffix of `a`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape("add", &sa, &sb));
        }
        let bv = self.value(b).data();
        let m = bv.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % m])
            .collect();
        Ok(self.push(Tensor::new(sa, data)?, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| {
            if y < x {
                y
            } else {
                x
            }
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Minimum(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = unary(self.value(x), |v| v * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = unary(self.value(x), |v| v + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = unary(self.value(x), |v| if v <= T::zero() { T::zero() } else { v });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = unary(self.value(x), |v| v.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = unary(self.value(x), sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = unary(self.value(x), |v| v.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = unary(self.value(x), |v| v.ln());
        self.push(v, Op::Log(x), &[x])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = unary(self.value(x), softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = unary(self.value(x), |v| v * v);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = unary(self.value(x), |v| v.max(lo).min(hi));
        self.push(v, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s / T::c(n as f64)), Op::MeanAll(x), &[x])
    }

    /// Sums over the last axis: `[.., d] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim().max(1);
        let data: Vec<T> = xv.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let mut shape = xv.shape().to_vec();
        shape.pop();
        let t = Tensor::new(shape, data).unwrap();
        self.push(t, Op::SumLast(x), &[x])
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = Tensor::<T>::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, end]));
        }
        let (outer, len, inner) = Tensor::<T>::axis_split(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Repeats `x` along a new leading axis: `s -> [times, ..s]`.
    pub fn tile0(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(xv.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(xv.shape());
        let t = Tensor::new(shape, data).unwrap();
        self.push(t, Op::Tile0(x), &[x])
    }

    fn norm_forward(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        layout: NormLayout,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let c = layout.channels;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::shape("norm affine", self.shape(p), &[c]));
            }
        }
        let xv = self.value(x).data();
        let m = T::c(layout.count() as f64);
        let (mean, var) = match stats {
            Some((mean, var)) => (mean.to_vec(), var.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (i, &v) in xv.iter().enumerate() {
                    mean[layout.channel_of(i)] += v;
                }
                mean.iter_mut().for_each(|v| *v = *v / m);
                for (i, &v) in xv.iter().enumerate() {
                    let ch = layout.channel_of(i);
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                (mean, var)
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = gamma.map(|g| self.value(g).data().to_vec());
        let b = beta.map(|b| self.value(b).data().to_vec());
        let out: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = layout.channel_of(i);
                let mut y = (v - mean[ch]) * rstd[ch];
                if let Some(g) = &g {
                    y = y * g[ch];
                }
                if let Some(b) = &b {
                    y = y + b[ch];
                }
                y
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let parents: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        let var_out = self.push(
            Tensor::new(shape, out)?,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                mean: mean.clone(),
                rstd,
                stats_from_input: stats.is_none(),
            },
            &parents,
        );
        Ok((var_out, mean, var))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: T) -> Result<Var> {
        let s = self.shape(x);
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", s, &[]))?;
        let rows = self.value(x).numel() / d;
        // each row is its own "channel" with `d` samples
        let layout = NormLayout {
            outer: 1,
            channels: rows,
            inner: d,
        };
        if gamma.is_some() || beta.is_some() {
            // affine parameters are per feature, not per row: apply them as a
            // separate broadcast multiply/add.
            let (y, _, _) = self.norm_forward(x, None, None, layout, None, eps)?;
            let y = match gamma {
                Some(g) => self.mul_broadcast(y, g)?,
                None => y,
            };
            return match beta {
                Some(b) => self.add(y, b),
                None => Ok(y),
            };
        }
        Ok(self.norm_forward(x, None, None, layout, None, eps)?.0)
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return self.mul(a, b);
        }
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape("mul_broadcast", &sa, &sb));
        }
        let n = self.value(a).numel() / self.value(b).numel();
        let tiled = self.tile0(b, n);
        let tiled = self.reshape(tiled, &sa)?;
        self.mul(a, tiled)
    }

    /// Batch normalization using statistics of the current batch.
    ///
    /// `x` is `[N, C, ..]`: statistics are per channel (axis 1) over every
    /// other axis. Returns the output plus the batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let layout = self.bn_layout(x)?;
        if layout.count() < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in train mode needs at least 2 samples per channel".into(),
            ));
        }
        self.norm_forward(x, Some(gamma), Some(beta), layout, None, eps)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let layout = self.bn_layout(x)?;
        if mean.len() != layout.channels || var.len() != layout.channels {
            return Err(Error::shape("batch norm stats", &[layout.channels], &[mean.len()]));
        }
        Ok(self
            .norm_forward(x, Some(gamma), Some(beta), layout, Some((mean, var)), eps)?
            .0)
    }

    fn bn_layout(&self, x: Var) -> Result<NormLayout> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", s, &[0, 0]));
        }
        Ok(NormLayout {
            outer: s[0],
            channels: s[1],
            inner: s[2..].iter().product(),
        })
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q`, `k`, `v` are `[B, S, E]` (already projected); heads split `E`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("attention k", q, k)?;
        self.same_shape("attention v", q, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("attention", &s, &[0, 0, 0]));
        }
        let (b, n, e) = (s[0], s[1], s[2]);
        if heads == 0 || e % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {e} is not divisible by {heads} heads"
            )));
        }
        let d = e / heads;
        let scale = T::one() / T::c(d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * n * n];
        let mut out = vec![T::zero(); b * n * e];
        for bi in 0..b {
            let base = bi * n * e;
            for h in 0..heads {
                let off = base + h * d;
                let p = &mut probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                gemm(
                    scale,
                    MatRef::strided(&qv[off..], n, d, e, 1),
                    MatRef::strided(&kv[off..], n, d, e, 1).t(),
                    T::zero(),
                    p,
                    n,
                );
                for row in p.chunks_mut(n) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    MatRef::new(p, n, n),
                    MatRef::strided(&vv[off..], n, d, e, 1),
                    T::zero(),
                    &mut out[off..],
                    e,
                );
            }
        }
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// 3-D convolution. `x: [N, C, D, H, W]`, `w: [Co, C, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape("conv3d", &xs, &ws));
        }
        let k = ws[2];
        let co = ws[0];
        let big = [xs[2], xs[3], xs[4]];
        let mut small = [0; 3];
        for i in 0..3 {
            if big[i] + 2 * pad < k {
                return Err(Error::shape("conv3d kernel", &xs, &ws));
            }
            small[i] = (big[i] + 2 * pad - k) / stride + 1;
        }
        let geom = ConvGeom::new(xs[1], big, small, k, stride, pad);
        let n = xs[0];
        let (rows, ps) = (geom.col_rows(), geom.small_len());
        let mut cols = vec![T::zero(); rows * ps];
        let mut out = vec![T::zero(); n * co * ps];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        for ni in 0..n {
            im2col(&geom, &xv[ni * geom.big_len() * geom.c..], &mut cols);
            let o = &mut out[ni * co * ps..(ni + 1) * co * ps];
            if let Some(bias) = &bias {
                for (c, row) in o.chunks_mut(ps).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[c]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            gemm(T::one(), MatRef::new(wv, co, rows), MatRef::new(&cols, rows, ps), beta, o, ps);
        }
        let shape = vec![n, co, small[0], small[1], small[2]];
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv3d { x, w, b, geom }, &parents))
    }

    /// Transposed 3-D convolution. `x: [N, Ci, D, H, W]`, `w: [Ci, Co, k, k, k]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape("conv_transpose3d", &xs, &ws));
        }
        let (ci, co, k) = (ws[0], ws[1], ws[2]);
        let small = [xs[2], xs[3], xs[4]];
        let mut big = [0; 3];
        for i in 0..3 {
            let full = (small[i] - 1) * stride + k;
            if full < 2 * pad + 1 {
                return Err(Error::shape("conv_transpose3d padding", &xs, &ws));
            }
            big[i] = full - 2 * pad;
        }
        let geom = ConvGeom::new(co, big, small, k, stride, pad);
        let n = xs[0];
        let (rows, ps) = (geom.col_rows(), geom.small_len());
        let bl = geom.big_len();
        let mut cols = vec![T::zero(); rows * ps];
        let mut out = vec![T::zero(); n * co * bl];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for ni in 0..n {
            gemm(
                T::one(),
                MatRef::new(wv, ci, rows).t(),
                MatRef::new(&xv[ni * ci * ps..(ni + 1) * ci * ps], ci, ps),
                T::zero(),
                &mut cols,
                ps,
            );
            let o = &mut out[ni * co * bl..(ni + 1) * co * bl];
            col2im(&geom, &cols, o);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (c, chunk) in o.chunks_mut(bl).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let shape = vec![n, co, big[0], big[1], big[2]];
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ConvTranspose3d { x, w, b, geom },
            &parents,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(f).collect();
        self.accumulate(grads, v, Tensor::new(shape, data).unwrap());
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = node.value.data();
        let val = |v: Var| self.value(v).data();
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (o, i) = (ws[0], ws[1]);
                let n = gd.len() / o;
                if need(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    gemm(
                        T::one(),
                        MatRef::new(gd, n, o),
                        MatRef::new(val(*w), o, i),
                        T::zero(),
                        &mut dx,
                        i,
                    );
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
                if need(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    gemm(
                        T::one(),
                        MatRef::new(gd, n, o).t(),
                        MatRef::new(val(*x), n, i),
                        T::zero(),
                        &mut dw,
                        i,
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![o, i], dw).unwrap());
                }
                if let Some(b) = b {
                    if need(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in gd.chunks(o) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += *v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![o], db).unwrap());
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if need(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        MatRef::new(gd, m, n),
                        MatRef::new(val(*b), k, n).t(),
                        T::zero(),
                        &mut da,
                        k,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if need(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        MatRef::new(val(*a), m, k).t(),
                        MatRef::new(gd, m, n),
                        T::zero(),
                        &mut db,
                        n,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if need(*b) {
                    let m = self.value(*b).numel().max(1);
                    let mut db = vec![T::zero(); m];
                    for (i, &v) in gd.iter().enumerate() {
                        db[i % m] += v;
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate_with(grads, *a, |i| gd[i] * bv[i]);
                self.accumulate_with(grads, *b, |i| gd[i] * av[i]);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate_with(grads, *a, |i| if bv[i] < av[i] { T::zero() } else { gd[i] });
                self.accumulate_with(grads, *b, |i| if bv[i] < av[i] { gd[i] } else { T::zero() });
            }
            Op::Scale(x, c) => self.accumulate_with(grads, *x, |i| gd[i] * *c),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let xv = val(*x);
                self.accumulate_with(grads, *x, |i| if xv[i] > T::zero() { gd[i] } else { T::zero() });
            }
            Op::Tanh(x) => self.accumulate_with(grads, *x, |i| gd[i] * (T::one() - y[i] * y[i])),
            Op::Sigmoid(x) => self.accumulate_with(grads, *x, |i| gd[i] * y[i] * (T::one() - y[i])),
            Op::Exp(x) => self.accumulate_with(grads, *x, |i| gd[i] * y[i]),
            Op::Log(x) => {
                let xv = val(*x);
                self.accumulate_with(grads, *x, |i| gd[i] / xv[i]);
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                self.accumulate_with(grads, *x, |i| gd[i] * sigmoid(xv[i]));
            }
            Op::Square(x) => {
                let xv = val(*x);
                self.accumulate_with(grads, *x, |i| gd[i] * T::c(2.0) * xv[i]);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                self.accumulate_with(grads, *x, |i| {
                    if xv[i] > *lo && xv[i] < *hi {
                        gd[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = gd[0];
                self.accumulate_with(grads, *x, |_| gv);
            }
            Op::MeanAll(x) => {
                let n = T::c(self.value(*x).numel().max(1) as f64);
                let gv = gd[0] / n;
                self.accumulate_with(grads, *x, |_| gv);
            }
            Op::SumLast(x) => {
                let d = self.value(*x).last_dim().max(1);
                self.accumulate_with(grads, *x, |i| gd[i / d]);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = Tensor::<T>::axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if need(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        let ps = self.shape(p).to_vec();
                        self.accumulate(grads, p, Tensor::new(ps, d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if need(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (outer, len, inner) = Tensor::<T>::axis_split(&xs, *axis);
                    let w = node.value.shape()[*axis];
                    let mut d = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * w * inner;
                        d[dst..dst + w * inner].copy_from_slice(&gd[src..src + w * inner]);
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, d).unwrap());
                }
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(xs, gd.to_vec()).unwrap());
            }
            Op::Tile0(x) => {
                let m = self.value(*x).numel();
                self.accumulate_with(grads, *x, |i| {
                    let mut s = T::zero();
                    let mut j = i;
                    while j < gd.len() {
                        s += gd[j];
                        j += m;
                    }
                    s
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                mean,
                rstd,
                stats_from_input,
            } => {
                let xv = val(*x);
                let c = layout.channels;
                let gam = gamma.map(|g| val(g));
                let xhat = |i: usize| {
                    let ch = layout.channel_of(i);
                    (xv[i] - mean[ch]) * rstd[ch]
                };
                if let Some(gv) = *gamma {
                    if need(gv) {
                        let mut dg = vec![T::zero(); c];
                        for i in 0..gd.len() {
                            dg[layout.channel_of(i)] += gd[i] * xhat(i);
                        }
                        self.accumulate(grads, gv, Tensor::new(vec![c], dg).unwrap());
                    }
                }
                if let Some(bv) = *beta {
                    if need(bv) {
                        let mut db = vec![T::zero(); c];
                        for i in 0..gd.len() {
                            db[layout.channel_of(i)] += gd[i];
                        }
                        self.accumulate(grads, bv, Tensor::new(vec![c], db).unwrap());
                    }
                }
                if need(*x) {
                    let dxhat = |i: usize| match gam {
                        Some(gm) => gd[i] * gm[layout.channel_of(i)],
                        None => gd[i],
                    };
                    if *stats_from_input {
                        let m = T::c(layout.count() as f64);
                        let mut s1 = vec![T::zero(); c];
                        let mut s2 = vec![T::zero(); c];
                        for i in 0..gd.len() {
                            let ch = layout.channel_of(i);
                            let dh = dxhat(i);
                            s1[ch] += dh;
                            s2[ch] += dh * xhat(i);
                        }
                        self.accumulate_with(grads, *x, |i| {
                            let ch = layout.channel_of(i);
                            rstd[ch] * (dxhat(i) - s1[ch] / m - xhat(i) * s2[ch] / m)
                        });
                    } else {
                        self.accumulate_with(grads, *x, |i| dxhat(i) * rstd[layout.channel_of(i)]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gd, grads),
            Op::Conv3d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let (rows, ps) = (geom.col_rows(), geom.small_len());
                let co = self.shape(*w)[0];
                let xv = val(*x);
                let wv = val(*w);
                let mut cols = vec![T::zero(); rows * ps];
                let mut dw = vec![T::zero(); co * rows];
                let mut dx = vec![T::zero(); xv.len()];
                let in_len = geom.c * geom.big_len();
                for ni in 0..n {
                    let gn = &gd[ni * co * ps..(ni + 1) * co * ps];
                    if need(*w) {
                        im2col(geom, &xv[ni * in_len..], &mut cols);
                        gemm(
                            T::one(),
                            MatRef::new(gn, co, ps),
                            MatRef::new(&cols, rows, ps).t(),
                            T::one(),
                            &mut dw,
                            rows,
                        );
                    }
                    if need(*x) {
                        gemm(
                            T::one(),
                            MatRef::new(wv, co, rows).t(),
                            MatRef::new(gn, co, ps),
                            T::zero(),
                            &mut cols,
                            ps,
                        );
                        col2im(geom, &cols, &mut dx[ni * in_len..(ni + 1) * in_len]);
                    }
                }
                if need(*w) {
                    let ws = self.shape(*w).to_vec();
                    self.accumulate(grads, *w, Tensor::new(ws, dw).unwrap());
                }
                if need(*x) {
                    let xs = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(xs, dx).unwrap());
                }
                if let Some(b) = b {
                    self.bias_grad_channels(*b, gd, n, co, ps, grads);
                }
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let ws = self.shape(*w).to_vec();
                let (ci, co) = (ws[0], ws[1]);
                let (rows, ps, bl) = (geom.col_rows(), geom.small_len(), geom.big_len());
                let xv = val(*x);
                let wv = val(*w);
                let mut cols = vec![T::zero(); rows * ps];
                let mut dw = vec![T::zero(); ci * rows];
                let mut dx = vec![T::zero(); xv.len()];
                for ni in 0..n {
                    im2col(geom, &gd[ni * co * bl..], &mut cols);
                    if need(*x) {
                        gemm(
                            T::one(),
                            MatRef::new(wv, ci, rows),
                            MatRef::new(&cols, rows, ps),
                            T::zero(),
                            &mut dx[ni * ci * ps..(ni + 1) * ci * ps],
                            ps,
                        );
                    }
                    if need(*w) {
                        gemm(
                            T::one(),
                            MatRef::new(&xv[ni * ci * ps..(ni + 1) * ci * ps], ci, ps),
                            MatRef::new(&cols, rows, ps).t(),
                            T::one(),
                            &mut dw,
                            rows,
                        );
                    }
                }
                if need(*w) {
                    self.accumulate(grads, *w, Tensor::new(ws, dw).unwrap());
                }
                if need(*x) {
                    let xs = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(xs, dx).unwrap());
                }
                if let Some(b) = b {
                    self.bias_grad_channels(*b, gd, n, co, bl, grads);
                }
            }
        }
    }

    fn bias_grad_channels(
        &self,
        b: Var,
        gd: &[T],
        n: usize,
        c: usize,
        len: usize,
        grads: &mut [Option<Tensor<T>>],
    ) {
        if !self.nodes[b.0].needs_grad {
            return;
        }
        let mut db = vec![T::zero(); c];
        for ni in 0..n {
            for (ch, acc) in db.iter_mut().enumerate() {
                let base = (ni * c + ch) * len;
                *acc += gd[base..base + len].iter().copied().sum::<T>();
            }
        }
        self.accumulate(grads, b, Tensor::new(vec![c], db).unwrap());
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = self.shape(q).to_vec();
        let (b, n, e) = (s[0], s[1], s[2]);
        let d = e / heads;
        let scale = T::one() / T::c(d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); n * n];
        for bi in 0..b {
            let base = bi * n * e;
            for h in 0..heads {
                let off = base + h * d;
                let p = &probs[(bi * heads + h) * n * n..(bi * heads + h + 1) * n * n];
                let go = MatRef::strided(&gd[off..], n, d, e, 1);
                // dV = P^T dO
                gemm(T::one(), MatRef::new(p, n, n).t(), go, T::zero(), &mut dv[off..], e);
                // dP = dO V^T
                gemm(
                    T::one(),
                    go,
                    MatRef::strided(&vv[off..], n, d, e, 1).t(),
                    T::zero(),
                    &mut dp,
                    n,
                );
                // dS = P * (dP - rowsum(dP * P)), pre-scaled
                for (prow, dprow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                    let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in dprow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                gemm(
                    T::one(),
                    MatRef::new(&dp, n, n),
                    MatRef::strided(&kv[off..], n, d, e, 1),
                    T::zero(),
                    &mut dq[off..],
                    e,
                );
                gemm(
                    T::one(),
                    MatRef::new(&dp, n, n).t(),
                    MatRef::strided(&qv[off..], n, d, e, 1),
                    T::zero(),
                    &mut dk[off..],
                    e,
                );
            }
        }
        for (var, data) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                self.accumulate(grads, var, Tensor::new(s.clone(), data).unwrap());
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}
