use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, ReplayBuffer, UpdateLog};
use crate::env::{seed_points, ActorBatch, Env};
use crate::error::{Error, Result};
use crate::geometry::{Streamline, Vec3};
use crate::nn::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// actors per episode, drawn from all seed points; 0 means all
    pub n_actors: usize,
    pub seed: u64,
    /// roll out and store transitions without updating
    pub collect_only: bool,
    /// index of the first episode, for resumed or phased training
    pub start_episode: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 200,
            n_actors: 256,
            seed: 1111,
            collect_only: false,
            start_episode: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// mean over actors of the summed rewards
    pub mean_return: f64,
    pub n_actors: usize,
    pub env_steps: usize,
    pub transitions: usize,
    pub n_valid: usize,
    /// fraction of valid streamlines that earned the oracle bonus
    pub plausible_fraction: Option<f64>,
    pub mean_length: f64,
    pub updates: usize,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub alpha: f64,
    pub buffer_len: usize,
}

fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(episode as u64 + 1);
    r
}

/// Seed points of one episode: `n_actors` of the phantom's seeds, drawn
/// without replacement and kept in seed order.
pub fn episode_seeds(env: &Env, n_actors: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
    let all = seed_points(env.phantom, env.cfg.npv, rng)?;
    if n_actors == 0 || n_actors >= all.len() {
        return Ok(all);
    }
    let mut pick = index::sample(rng, all.len(), n_actors).into_vec();
    pick.sort_unstable();
    Ok(pick.into_iter().map(|i| all[i]).collect())
}

/// Runs `cfg.episodes` episodes: roll out every actor to termination,
/// store each transition, and run the agent's update rounds after every
/// environment step. `on_episode` sees each log as it is produced.
pub fn train<T: Scalar>(
    agent: &mut Agent<T>,
    buffer: &mut ReplayBuffer,
    env: &Env,
    cfg: &TrainConfig,
    on_episode: &mut dyn FnMut(&EpisodeLog, &Agent<T>) -> Result<()>,
) -> Result<Vec<EpisodeLog>> {
    if buffer.state_dim() != env.cfg.state_len() || agent.state_dim != env.cfg.state_len() {
        return Err(Error::Config(format!(
            "state size mismatch: env {}, agent {}, buffer {}",
            env.cfg.state_len(),
            agent.state_dim,
            buffer.state_dim()
        )));
    }
    let mut logs = Vec::with_capacity(cfg.episodes);
    for k in 0..cfg.episodes {
        let episode = cfg.start_episode + k;
        let mut rng = episode_rng(cfg.seed, episode);
        let seeds = episode_seeds(env, cfg.n_actors, &mut rng)?;
        let n = seeds.len();
        let mut batch = ActorBatch::new(&seeds);
        let all: Vec<usize> = (0..n).collect();
        let mut states = env.states(&batch, &all)?;
        let mut returns = vec![0.0; n];
        let (mut steps, mut transitions) = (0, 0);
        let mut updates: Vec<UpdateLog> = Vec::new();
        let (mut n_valid, mut n_bonus, mut len_sum) = (0usize, 0usize, 0.0);
        while batch.any_alive() {
            let active = batch.alive_indices();
            let cur: Vec<Vec<f32>> = active.iter().map(|&i| std::mem::take(&mut states[i])).collect();
            let acts = agent.act(&cur, true, &mut rng)?;
            let mut full = vec![[0.0; 3]; n];
            for (k, &i) in active.iter().enumerate() {
                full[i] = acts[k];
            }
            let out = env.step(&mut batch, &full)?;
            let next = env.states(&batch, &active)?;
            for (k, &i) in active.iter().enumerate() {
                let a = acts[k];
                let r = out.rewards[i];
                buffer.push(
                    &cur[k],
                    [a[0] as f32, a[1] as f32, a[2] as f32],
                    r as f32,
                    &next[k],
                    out.dones[i],
                )?;
                returns[i] += r;
            }
            for (k, s) in next.into_iter().enumerate() {
                states[active[k]] = s;
            }
            for f in &out.finished {
                if f.valid {
                    n_valid += 1;
                    len_sum += f.streamline.as_ref().map_or(0.0, |s| s.arc_length());
                    if f.bonus > 0.0 {
                        n_bonus += 1;
                    }
                }
            }
            steps += 1;
            transitions += active.len();
            if !cfg.collect_only && buffer.len() >= agent.cfg.learning_starts.max(1) {
                updates.extend(agent.update_round(buffer)?);
            }
        }
        let mean = |f: fn(&UpdateLog) -> f64| {
            (!updates.is_empty()).then(|| updates.iter().map(f).sum::<f64>() / updates.len() as f64)
        };
        let log = EpisodeLog {
            episode,
            mean_return: returns.iter().sum::<f64>() / n as f64,
            n_actors: n,
            env_steps: steps,
            transitions,
            n_valid,
            plausible_fraction: (env.reward.oracle_bonus > 0.0 && n_valid > 0)
                .then(|| n_bonus as f64 / n_valid as f64),
            mean_length: if n_valid > 0 { len_sum / n_valid as f64 } else { 0.0 },
            updates: updates.len(),
            critic_loss: mean(|u| u.critic_loss),
            policy_loss: mean(|u| u.policy_loss),
            alpha: agent.alpha(),
            buffer_len: buffer.len(),
        };
        log::info!(
            "episode {episode}: return {:.3} valid {}/{} updates {}",
            log.mean_return,
            log.n_valid,
            n,
            log.updates
        );
        on_episode(&log, agent)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Tracks from every seed and returns the valid streamlines in seed order.
pub fn track<T: Scalar>(
    agent: &Agent<T>,
    env: &Env,
    seeds: &[Vec3],
    stochastic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Streamline>> {
    let n = seeds.len();
    let mut batch = ActorBatch::new(seeds);
    let mut out: Vec<Option<Streamline>> = vec![None; n];
    while batch.any_alive() {
        let active = batch.alive_indices();
        let states = env.states(&batch, &active)?;
        let acts = agent.act(&states, stochastic, rng)?;
        let mut full = vec![[0.0; 3]; n];
        for (k, &i) in active.iter().enumerate() {
            full[i] = acts[k];
        }
        let step = env.step(&mut batch, &full)?;
        for f in step.finished {
            if f.valid {
                out[f.actor] = f.streamline;
            }
        }
    }
    Ok(out.into_iter().flatten().collect())
}
