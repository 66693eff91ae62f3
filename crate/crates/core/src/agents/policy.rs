use rand::Rng;

use crate::error::Result;
use crate::nn::{Binding, Mlp, MlpConfig, ParamStore, Scalar, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const ACTION_DIM: usize = 3;

/// Diagonal Gaussian policy squashed by tanh.
#[derive(Debug, Clone)]
pub struct Policy {
    pub net: Mlp,
}

impl Policy {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        state_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let cfg = MlpConfig::plain(hidden.to_vec());
        Policy {
            net: Mlp::new(store, "pi", state_dim, 2 * ACTION_DIM, &cfg, rng),
        }
    }

    /// Mean and clamped log-std, each `[B, 3]`.
    pub fn moments<T: Scalar>(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, s: Var) -> Result<(Var, Var)> {
        let out = self.net.forward(tape, bind, s)?;
        let mu = tape.slice(out, 1, 0, ACTION_DIM)?;
        let ls = tape.slice(out, 1, ACTION_DIM, 2 * ACTION_DIM)?;
        let ls = tape.clamp(ls, T::c(LOG_STD_MIN), T::c(LOG_STD_MAX));
        Ok((mu, ls))
    }

    /// Reparameterized sample `a = tanh(mu + sigma * eps)` with its log
    /// density `[B]`, including the tanh change of variables.
    pub fn sample<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding<T>,
        s: Var,
        eps: &[f64],
    ) -> Result<(Var, Var)> {
        let (mu, ls) = self.moments(tape, bind, s)?;
        let b = tape.shape(mu)[0];
        let e = tape.constant(Tensor::from_f64(&[b, ACTION_DIM], eps)?);
        let sigma = tape.exp(ls);
        let noise = tape.mul(sigma, e)?;
        let u = tape.add(mu, noise)?;
        let a = tape.tanh(u);
        // log N(u; mu, sigma) = -eps^2/2 - log(2 pi)/2 - log sigma
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let base: Vec<f64> = eps
            .chunks(ACTION_DIM)
            .map(|r| r.iter().map(|x| -0.5 * x * x - half_log_2pi).sum())
            .collect();
        let base = tape.constant(Tensor::from_f64(&[b], &base)?);
        let sum_ls = tape.sum_last(ls);
        // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
        let m2u = tape.scale(u, T::c(-2.0));
        let sp = tape.softplus(m2u);
        let t = tape.add(u, sp)?;
        let t = tape.scale(t, T::c(-2.0));
        let corr = tape.add_scalar(t, T::c(2.0 * std::f64::consts::LN_2));
        let corr = tape.sum_last(corr);
        let lp = tape.sub(base, sum_ls)?;
        let lp = tape.sub(lp, corr)?;
        Ok((a, lp))
    }

    /// Deterministic action `tanh(mu)`.
    pub fn mean_action<T: Scalar>(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, s: Var) -> Result<Var> {
        let (mu, _) = self.moments(tape, bind, s)?;
        Ok(tape.tanh(mu))
    }
}
