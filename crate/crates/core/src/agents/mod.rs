//! Off-policy actor-critic agents: SAC, DroQ and CrossQ.

pub mod buffer;
pub mod policy;
pub mod train;

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use buffer::{Batch, ReplayBuffer};
pub use policy::{Policy, ACTION_DIM, LOG_STD_MAX, LOG_STD_MIN};
pub use train::{track, train, EpisodeLog, TrainConfig};

use crate::error::{Error, Result};
use crate::nn::{checkpoint, Adam, Binding, Mlp, MlpConfig, Mode, NormKind, ParamStore, Scalar, Tape, Tensor, Var};

const ACT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sac,
    Droq,
    Crossq,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sac" => Ok(Algorithm::Sac),
            "droq" => Ok(Algorithm::Droq),
            "crossq" => Ok(Algorithm::Crossq),
            _ => Err(Error::Config(format!("unknown algorithm {s:?} (sac|droq|crossq)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub alpha_init: f64,
    pub target_entropy: f64,
    pub tau: f64,
    /// update rounds per environment step; 1, or 5 for DroQ, when unset
    pub utd: Option<usize>,
    /// critic dropout rate (DroQ)
    pub dropout: f64,
    /// critic normalization; by default none for SAC, layer norm for DroQ,
    /// batch norm for CrossQ
    pub critic_norm: Option<NormKind>,
    pub buffer_capacity: usize,
    /// transitions collected before the first update
    pub learning_starts: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            algorithm: Algorithm::Sac,
            gamma: 0.95,
            lr: 5e-4,
            batch_size: 256,
            hidden: vec![256, 256, 256],
            alpha_init: 0.2,
            target_entropy: -(ACTION_DIM as f64),
            tau: 0.005,
            utd: None,
            dropout: 0.01,
            critic_norm: None,
            buffer_capacity: 100_000,
            learning_starts: 256,
            seed: 1111,
        }
    }
}

impl AgentConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        AgentConfig {
            algorithm,
            ..AgentConfig::default()
        }
    }

    /// Published sizes: 1024-wide critics and policy, batch 4096,
    /// one million transitions.
    pub fn published_scale(mut self) -> Self {
        self.hidden = vec![1024, 1024, 1024];
        self.batch_size = 4096;
        self.buffer_capacity = 1_000_000;
        self.learning_starts = 4096;
        self
    }

    pub fn utd(&self) -> usize {
        self.utd.unwrap_or(match self.algorithm {
            Algorithm::Droq => 5,
            _ => 1,
        })
    }

    pub fn critic_norm(&self) -> NormKind {
        self.critic_norm.unwrap_or(match self.algorithm {
            Algorithm::Sac => NormKind::None,
            Algorithm::Droq => NormKind::Layer,
            Algorithm::Crossq => NormKind::Batch,
        })
    }

    pub fn critic_dropout(&self) -> f64 {
        match self.algorithm {
            Algorithm::Droq => self.dropout,
            _ => 0.0,
        }
    }

    pub fn has_targets(&self) -> bool {
        self.algorithm != Algorithm::Crossq
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} not in [0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} not in (0, 1]", self.tau)));
        }
        if self.utd() == 0 {
            return Err(Error::Config("utd must be at least 1".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.hidden.is_empty() {
            return Err(Error::Config("batch, buffer and hidden sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.alpha_init > 0.0) {
            return Err(Error::Config("lr and alpha_init must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.algorithm == Algorithm::Crossq && self.batch_size < 2 && self.critic_norm() == NormKind::Batch {
            return Err(Error::Config("batch-norm critics need batch_size >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub mean_q: f64,
}

/// Result of a critic forward/backward pass on one batch.
pub struct CriticPass<T: Scalar> {
    pub loss: f64,
    pub grads: Vec<Option<Tensor<T>>>,
    pub targets: Vec<f64>,
    pub mean_q: f64,
    binding: Binding<T>,
}

impl<T: Scalar> CriticPass<T> {
    /// Batch moments of each train-mode batch norm, in call order.
    pub fn batch_moments(&self) -> Vec<(Vec<T>, Vec<T>)> {
        self.binding.batch_moments()
    }
}

/// `r + gamma (1 - done) (q_next - alpha log_pi_next)`.
pub fn bellman_target(r: f64, done: bool, q_next: f64, logp_next: f64, alpha: f64, gamma: f64) -> f64 {
    if done {
        r
    } else {
        r + gamma * (q_next - alpha * logp_next)
    }
}

fn tensor_f32<T: Scalar>(shape: &[usize], data: &[f32]) -> Result<Tensor<T>> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| T::c(v as f64)).collect())
}

fn normal_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone)]
pub struct Agent<T: Scalar> {
    pub cfg: AgentConfig,
    pub state_dim: usize,
    pub policy: Policy,
    pub policy_store: ParamStore<T>,
    pub critics: [Mlp; 2],
    pub critic_store: ParamStore<T>,
    pub target_store: Option<ParamStore<T>>,
    pub alpha_store: ParamStore<T>,
    policy_opt: Adam<T>,
    critic_opt: Adam<T>,
    alpha_opt: Adam<T>,
    rng: ChaCha8Rng,
    n_updates: u64,
}

impl<T: Scalar> Agent<T> {
    pub fn new(cfg: AgentConfig, state_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut policy_store = ParamStore::new();
        let policy = Policy::new(&mut policy_store, state_dim, &cfg.hidden, &mut init);
        let mut critic_store = ParamStore::new();
        let mcfg = MlpConfig {
            hidden: cfg.hidden.clone(),
            norm: cfg.critic_norm(),
            dropout: cfg.critic_dropout(),
        };
        let n_in = state_dim + ACTION_DIM;
        let critics = [
            Mlp::new(&mut critic_store, "q1", n_in, 1, &mcfg, &mut init),
            Mlp::new(&mut critic_store, "q2", n_in, 1, &mcfg, &mut init),
        ];
        let target_store = cfg.has_targets().then(|| critic_store.clone());
        let mut alpha_store = ParamStore::new();
        alpha_store.add_param("log_alpha", Tensor::from_f64(&[1], &[cfg.alpha_init.ln()])?);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_a9e47);
        Ok(Agent {
            policy_opt: Adam::new(cfg.lr),
            critic_opt: Adam::new(cfg.lr),
            alpha_opt: Adam::new(cfg.lr),
            cfg,
            state_dim,
            policy,
            policy_store,
            critics,
            critic_store,
            target_store,
            alpha_store,
            rng,
            n_updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_store.get(self.alpha_id()).data()[0].f64().exp()
    }

    fn alpha_id(&self) -> crate::nn::ParamId {
        self.alpha_store.id("log_alpha").unwrap()
    }

    pub fn n_updates(&self) -> u64 {
        self.n_updates
    }

    /// Both critic heads on `x = [s, a]`, each `[B]`.
    fn critic_q(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, x: Var) -> Result<(Var, Var)> {
        let b = tape.shape(x)[0];
        let q1 = self.critics[0].forward(tape, bind, x)?;
        let q2 = self.critics[1].forward(tape, bind, x)?;
        Ok((tape.reshape(q1, &[b])?, tape.reshape(q2, &[b])?))
    }

    fn critic_mode(&self, seed: u64) -> Mode {
        Mode::Train { seed }
    }

    /// Policy samples (values only) for the given states.
    fn sample_values(&self, states: &[f32], b: usize, eps: &[f64]) -> Result<(Vec<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let mut bind = self.policy_store.bind(&mut tape, false, Mode::Eval);
        let s = tape.constant(tensor_f32(&[b, self.state_dim], states)?);
        let (a, lp) = self.policy.sample(&mut tape, &mut bind, s, eps)?;
        Ok((tape.value(a).data().to_vec(), tape.value(lp).data().to_vec()))
    }

    /// Critic loss on `batch` for the given critic parameters, with next
    /// actions drawn from `eps_next`. Targets come from the target critics
    /// (SAC, DroQ) or from the joint current/next forward pass (CrossQ).
    pub fn critic_loss(
        &self,
        critic: &ParamStore<T>,
        batch: &Batch,
        eps_next: &[f64],
        alpha: f64,
        seed: u64,
    ) -> Result<CriticPass<T>> {
        let b = batch.size;
        let d = self.state_dim;
        let (a_next, lp_next) = self.sample_values(&batch.next_states, b, eps_next)?;
        let s = tensor_f32::<T>(&[b, d], &batch.states)?;
        let a = tensor_f32::<T>(&[b, ACTION_DIM], &batch.actions)?;
        let s2 = tensor_f32::<T>(&[b, d], &batch.next_states)?;
        let a2 = Tensor::new(vec![b, ACTION_DIM], a_next)?;
        let gamma = self.cfg.gamma;
        let targets_from = |q1n: &[T], q2n: &[T]| -> Vec<f64> {
            (0..b)
                .map(|i| {
                    let qn = q1n[i].f64().min(q2n[i].f64());
                    bellman_target(
                        batch.rewards[i] as f64,
                        batch.dones[i] > 0.5,
                        qn,
                        lp_next[i].f64(),
                        alpha,
                        gamma,
                    )
                })
                .collect()
        };
        let mut tape = Tape::new();
        let mut bind = critic.bind(&mut tape, true, self.critic_mode(seed));
        let (q1, q2, targets) = match &self.target_store {
            Some(target) => {
                let mut tt = Tape::new();
                let mut tb = target.bind(&mut tt, false, self.critic_mode(seed ^ 0x7a5));
                let sv = tt.constant(s2.clone());
                let av = tt.constant(a2.clone());
                let x = tt.concat(&[sv, av], 1)?;
                let (q1n, q2n) = self.critic_q(&mut tt, &mut tb, x)?;
                let targets = targets_from(tt.value(q1n).data(), tt.value(q2n).data());
                let sv = tape.constant(s);
                let av = tape.constant(a);
                let x = tape.concat(&[sv, av], 1)?;
                let (q1, q2) = self.critic_q(&mut tape, &mut bind, x)?;
                (q1, q2, targets)
            }
            None => {
                let sv = tape.constant(s);
                let av = tape.constant(a);
                let cur = tape.concat(&[sv, av], 1)?;
                let sv = tape.constant(s2);
                let av = tape.constant(a2);
                let next = tape.concat(&[sv, av], 1)?;
                let x = tape.concat(&[cur, next], 0)?;
                let (q1c, q2c) = self.critic_q(&mut tape, &mut bind, x)?;
                let targets = targets_from(&tape.value(q1c).data()[b..], &tape.value(q2c).data()[b..]);
                let q1 = tape.slice(q1c, 0, 0, b)?;
                let q2 = tape.slice(q2c, 0, 0, b)?;
                (q1, q2, targets)
            }
        };
        let y = tape.constant(Tensor::from_f64(&[b], &targets)?);
        let l1 = tape.mse(q1, y)?;
        let l2 = tape.mse(q2, y)?;
        let l = tape.add(l1, l2)?;
        let loss = tape.scale(l, T::c(0.5));
        let mean_q = tape.value(q1).data().iter().map(|v| v.f64()).sum::<f64>() / b as f64;
        let mut g = tape.backward(loss)?;
        Ok(CriticPass {
            loss: tape.value(loss).item().f64(),
            grads: bind.grads(&mut g),
            targets,
            mean_q,
            binding: bind,
        })
    }

    /// Both critics' values on the batch's `(s, a)` rows.
    pub fn q_values(&self, batch: &Batch, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut bind = self.critic_store.bind(&mut tape, false, mode);
        let s = tape.constant(tensor_f32::<T>(&[batch.size, self.state_dim], &batch.states)?);
        let a = tape.constant(tensor_f32::<T>(&[batch.size, ACTION_DIM], &batch.actions)?);
        let x = tape.concat(&[s, a], 1)?;
        let (q1, q2) = self.critic_q(&mut tape, &mut bind, x)?;
        let f = |v: Var| tape.value(v).data().iter().map(|x| x.f64()).collect();
        Ok((f(q1), f(q2)))
    }

    /// Policy loss `mean(alpha log pi - min Q)` and its gradients.
    pub fn policy_loss(&self, batch: &Batch, eps: &[f64], alpha: f64, seed: u64) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let b = batch.size;
        let mut tape = Tape::new();
        let mut pb = self.policy_store.bind(&mut tape, true, Mode::Eval);
        let s = tape.constant(tensor_f32(&[b, self.state_dim], &batch.states)?);
        let (a, lp) = self.policy.sample(&mut tape, &mut pb, s, eps)?;
        let mode = if self.cfg.algorithm == Algorithm::Crossq {
            Mode::Eval
        } else {
            self.critic_mode(seed)
        };
        let mut cb = self.critic_store.bind(&mut tape, false, mode);
        let x = tape.concat(&[s, a], 1)?;
        let (q1, q2) = self.critic_q(&mut tape, &mut cb, x)?;
        let q = tape.minimum(q1, q2)?;
        let alp = tape.scale(lp, T::c(alpha));
        let diff = tape.sub(alp, q)?;
        let loss = tape.mean(diff);
        let mut g = tape.backward(loss)?;
        Ok((tape.value(loss).item().f64(), pb.grads(&mut g)))
    }

    /// One update round on a fixed batch and fixed noise. `eps` and
    /// `eps_next` hold `3 * batch.size` standard normal draws each.
    pub fn update_with(&mut self, batch: &Batch, eps: &[f64], eps_next: &[f64], seed: u64) -> Result<UpdateLog> {
        let b = batch.size;
        if eps.len() != b * ACTION_DIM || eps_next.len() != b * ACTION_DIM {
            return Err(Error::InvalidArgument("noise length must be 3 per batch row".into()));
        }
        // temperature, using the pre-update value everywhere below
        let alpha = self.alpha();
        let (_, lp) = self.sample_values(&batch.states, b, eps)?;
        let m = lp.iter().map(|v| v.f64()).sum::<f64>() / b as f64 + self.cfg.target_entropy;
        let mut tape = Tape::new();
        let ab = self.alpha_store.bind(&mut tape, true, Mode::Eval);
        let la = ab.var(self.alpha_id());
        let ea = tape.exp(la);
        let s = tape.sum(ea);
        let aloss = tape.scale(s, T::c(-m));
        let mut g = tape.backward(aloss)?;
        let alpha_loss = tape.value(aloss).item().f64();
        self.alpha_opt.step(&mut self.alpha_store, &ab.grads(&mut g))?;

        let mut pass = self.critic_loss(&self.critic_store, batch, eps_next, alpha, seed)?;
        if !pass.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "critic loss {} at update {} (mean q {}, alpha {alpha})",
                pass.loss, self.n_updates, pass.mean_q
            )));
        }
        self.critic_store.apply_bn_updates(&mut pass.binding);
        self.critic_opt.step(&mut self.critic_store, &pass.grads)?;

        let (ploss, pgrads) = self.policy_loss(batch, eps, alpha, seed ^ 0x90c)?;
        if !ploss.is_finite() {
            return Err(Error::Numeric(format!("policy loss {ploss} at update {}", self.n_updates)));
        }
        self.policy_opt.step(&mut self.policy_store, &pgrads)?;

        if let Some(target) = &mut self.target_store {
            target.polyak_from(&self.critic_store, self.cfg.tau)?;
        }
        self.n_updates += 1;
        Ok(UpdateLog {
            critic_loss: pass.loss,
            policy_loss: ploss,
            alpha_loss,
            alpha,
            mean_q: pass.mean_q,
        })
    }

    /// Samples a batch and noise from the agent's own stream and updates.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<UpdateLog> {
        if buffer.is_empty() {
            return Err(Error::Empty("cannot update from an empty replay buffer".into()));
        }
        let batch = buffer.sample(self.cfg.batch_size, &mut self.rng)?;
        let eps = normal_noise(batch.size * ACTION_DIM, &mut self.rng);
        let eps_next = normal_noise(batch.size * ACTION_DIM, &mut self.rng);
        let seed = self.rng.next_u64();
        self.update_with(&batch, &eps, &eps_next, seed)
    }

    /// The `utd` update rounds that follow one environment step.
    pub fn update_round(&mut self, buffer: &ReplayBuffer) -> Result<Vec<UpdateLog>> {
        (0..self.cfg.utd()).map(|_| self.update(buffer)).collect()
    }

    /// Actions for a batch of states: `tanh(mu + sigma eps)` when
    /// stochastic, `tanh(mu)` otherwise.
    pub fn act<R: Rng>(&self, states: &[Vec<f32>], stochastic: bool, rng: &mut R) -> Result<Vec<[f64; 3]>> {
        let n = states.len();
        let eps = if stochastic {
            normal_noise(n * ACTION_DIM, rng)
        } else {
            Vec::new()
        };
        let parts: Vec<Result<Vec<T>>> = states
            .par_chunks(ACT_CHUNK)
            .enumerate()
            .map(|(k, rows)| {
                let mut flat = Vec::with_capacity(rows.len() * self.state_dim);
                for r in rows {
                    if r.len() != self.state_dim {
                        return Err(Error::shape("policy input", &[r.len()], &[self.state_dim]));
                    }
                    flat.extend_from_slice(r);
                }
                let mut tape = Tape::new();
                let mut bind = self.policy_store.bind(&mut tape, false, Mode::Eval);
                let s = tape.constant(tensor_f32(&[rows.len(), self.state_dim], &flat)?);
                let a = if stochastic {
                    let start = k * ACT_CHUNK * ACTION_DIM;
                    let e = &eps[start..start + rows.len() * ACTION_DIM];
                    self.policy.sample(&mut tape, &mut bind, s, e)?.0
                } else {
                    self.policy.mean_action(&mut tape, &mut bind, s)?
                };
                Ok(tape.value(a).data().to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for p in parts {
            for c in p?.chunks(ACTION_DIM) {
                out.push([c[0].f64(), c[1].f64(), c[2].f64()]);
            }
        }
        Ok(out)
    }

    /// Every tensor of the agent under its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(self.policy_store.iter().map(|(n, t)| (format!("policy.{n}"), t)));
        out.extend(self.critic_store.iter().map(|(n, t)| (format!("critic.{n}"), t)));
        if let Some(target) = &self.target_store {
            out.extend(target.iter().map(|(n, t)| (format!("target.{n}"), t)));
        }
        out.extend(self.alpha_store.iter().map(|(n, t)| (n.to_string(), t)));
        out
    }

    /// Parameters to `path`, configuration to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        checkpoint::write_tensors(&mut f, &self.named_tensors())?;
        let meta = AgentMeta {
            config: self.cfg.clone(),
            state_dim: self.state_dim,
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(sidecar(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar(path))?;
        let meta: AgentMeta = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut agent = Agent::new(meta.config, meta.state_dim)?;
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tensors: Vec<(String, Tensor<T>)> = checkpoint::read_tensors(&mut f)?;
        let mut seen = 0;
        for (name, t) in tensors {
            let (store, local) = if let Some(n) = name.strip_prefix("policy.") {
                (&mut agent.policy_store, n)
            } else if let Some(n) = name.strip_prefix("critic.") {
                (&mut agent.critic_store, n)
            } else if let Some(n) = name.strip_prefix("target.") {
                match agent.target_store.as_mut() {
                    Some(s) => (s, n),
                    None => return Err(Error::Format(format!("unexpected tensor {name}"))),
                }
            } else {
                (&mut agent.alpha_store, name.as_str())
            };
            store.set(local, t)?;
            seen += 1;
        }
        if seen != agent.named_tensors().len() {
            return Err(Error::Format(format!(
                "checkpoint holds {seen} tensors, agent has {}",
                agent.named_tensors().len()
            )));
        }
        Ok(agent)
    }
}

#[derive(Serialize, Deserialize)]
struct AgentMeta {
    config: AgentConfig,
    state_dim: usize,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}
