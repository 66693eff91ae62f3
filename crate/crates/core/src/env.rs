//! The tracking MDP: seeding, batched propagation, stopping rules, states.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Phantom, PeakFinder, SphereSampling, N_COEFFS};
use crate::geometry::{trilinear, trilinear_into, Streamline, Vec3, VoxelGrid};
use crate::reward::{bonus_from_score, local_reward, RewardConfig, StreamlineScorer};

pub const LOCAL6_SIGNAL: usize = 7 * N_COEFFS;
pub const ENCODED_SIGNAL: usize = 864;
pub const PATCH: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMode {
    Local6,
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Δ, in voxels
    pub step_size: f64,
    /// lengths are `steps * step_size`
    pub max_len: f64,
    pub min_len: f64,
    pub angle_max_deg: f64,
    pub stop_threshold: f64,
    pub n_dirs: usize,
    pub npv: usize,
    pub state_mode: StateMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            step_size: 0.5,
            max_len: 200.0,
            min_len: 20.0,
            angle_max_deg: 30.0,
            stop_threshold: 0.1,
            n_dirs: 100,
            npv: 2,
            state_mode: StateMode::Local6,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.min_len > 0.0 && self.min_len < self.max_len) {
            return Err(Error::Config("need 0 < min_len < max_len".into()));
        }
        if !(self.angle_max_deg > 0.0 && self.angle_max_deg < 90.0) {
            return Err(Error::Config("angle_max_deg must be in (0, 90)".into()));
        }
        if self.npv == 0 {
            return Err(Error::Config("npv must be at least 1".into()));
        }
        Ok(())
    }

    pub fn signal_len(&self) -> usize {
        match self.state_mode {
            StateMode::Local6 => LOCAL6_SIGNAL,
            StateMode::Encoded => ENCODED_SIGNAL,
        }
    }

    pub fn state_len(&self) -> usize {
        self.signal_len() + 3 * self.n_dirs
    }
}

/// Frozen encoder of `28 x 9 x 9 x 9` fODF patches to 864 features.
pub trait PatchEncoder: Sync {
    /// `patches` holds `n` channel-major patches; returns `n * 864` values.
    fn encode_patches(&self, patches: &[f32], n: usize) -> Result<Vec<f32>>;
}

/// `npv` uniform points in every seeding voxel, in voxel storage order.
pub fn seed_points<R: Rng>(phantom: &Phantom, npv: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    if npv == 0 {
        return Err(Error::Config("npv must be at least 1".into()));
    }
    let voxels = phantom.seeding_mask.voxels();
    if voxels.is_empty() {
        return Err(Error::Config("seeding mask is empty".into()));
    }
    let mut out = Vec::with_capacity(voxels.len() * npv);
    for [x, y, z] in voxels {
        for _ in 0..npv {
            out.push(Vec3::new(
                x as f64 + rng.gen_range(-0.5..0.5),
                y as f64 + rng.gen_range(-0.5..0.5),
                z as f64 + rng.gen_range(-0.5..0.5),
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Angle,
    Mask,
    MaxLength,
    ZeroAction,
}

#[derive(Debug, Clone)]
pub struct Finished {
    pub actor: usize,
    /// `None` when the actor never left its seed
    pub streamline: Option<Streamline>,
    /// long enough to be kept
    pub valid: bool,
    pub reason: StopReason,
    pub bonus: f64,
}

/// All actors of one rollout.
#[derive(Debug, Clone)]
pub struct ActorBatch {
    pub points: Vec<Vec<Vec3>>,
    /// most recent last, capped at `n_dirs`
    pub history: Vec<VecDeque<Vec3>>,
    pub alive: Vec<bool>,
}

impl ActorBatch {
    pub fn new(seeds: &[Vec3]) -> Self {
        ActorBatch {
            points: seeds.iter().map(|&p| vec![p]).collect(),
            history: vec![VecDeque::new(); seeds.len()],
            alive: vec![true; seeds.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        *self.points[i].last().unwrap()
    }

    pub fn n_steps(&self, i: usize) -> usize {
        self.points[i].len() - 1
    }

    pub fn alive_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.alive[i]).collect()
    }

    pub fn any_alive(&self) -> bool {
        self.alive.iter().any(|&a| a)
    }
}

/// Result of one batched step, indexed like the batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// actors that were alive when the step began
    pub active: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub finished: Vec<Finished>,
}

pub struct Env<'a> {
    pub phantom: &'a Phantom,
    pub cfg: EnvConfig,
    pub reward: RewardConfig,
    finder: PeakFinder,
    oracle: Option<&'a dyn StreamlineScorer>,
    encoder: Option<&'a dyn PatchEncoder>,
    latent_cache: Mutex<HashMap<[i64; 3], Vec<f32>>>,
}

impl<'a> Env<'a> {
    pub fn new(phantom: &'a Phantom, cfg: EnvConfig, reward: RewardConfig) -> Result<Self> {
        cfg.validate()?;
        reward.validate()?;
        let finder = PeakFinder::new(SphereSampling::default_peaks(), reward.peak_rel_threshold)?;
        Ok(Env {
            phantom,
            cfg,
            reward,
            finder,
            oracle: None,
            encoder: None,
            latent_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_oracle(mut self, oracle: &'a dyn StreamlineScorer) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn with_encoder(mut self, encoder: &'a dyn PatchEncoder) -> Self {
        self.encoder = Some(encoder);
        self
    }

    pub fn peak_finder(&self) -> &PeakFinder {
        &self.finder
    }

    /// Seeds all actors of the phantom's seeding mask.
    pub fn reset<R: Rng>(&self, rng: &mut R) -> Result<ActorBatch> {
        Ok(ActorBatch::new(&seed_points(self.phantom, self.cfg.npv, rng)?))
    }

    fn mask_value(&self, p: Vec3) -> Option<f64> {
        trilinear(&self.phantom.tracking_field, p).ok().map(|v| v[0])
    }

    /// Advances every alive actor by one step. `actions[i]` is used for
    /// actor `i`; entries of dead actors are ignored.
    pub fn step(&self, batch: &mut ActorBatch, actions: &[[f64; 3]]) -> Result<StepOutput> {
        if actions.len() != batch.len() {
            return Err(Error::InvalidArgument(format!(
                "{} actions for {} actors",
                actions.len(),
                batch.len()
            )));
        }
        let active = batch.alive_indices();
        let cos_max = self.cfg.angle_max_deg.to_radians().cos();
        let max_steps = (self.cfg.max_len / self.cfg.step_size).round() as usize;

        struct Move {
            local: f64,
            next: Option<Vec3>,
            dir: Option<Vec3>,
            stop: Option<StopReason>,
        }
        let moves: Vec<Move> = active
            .par_iter()
            .map(|&i| {
                let p = batch.position(i);
                let a = Vec3::from_slice(&actions[i]);
                let Some(a) = a.normalized() else {
                    log::debug!("actor {i}: zero-norm action, terminating");
                    return Move {
                        local: 0.0,
                        next: None,
                        dir: None,
                        stop: Some(StopReason::ZeroAction),
                    };
                };
                let prev = batch.history[i].back().copied().unwrap_or(a);
                let local = local_reward(p, a, prev, &self.phantom.volume, &self.finder);
                if a.dot(prev) < cos_max {
                    return Move {
                        local,
                        next: None,
                        dir: None,
                        stop: Some(StopReason::Angle),
                    };
                }
                let next = p + a * self.cfg.step_size;
                match self.mask_value(next) {
                    Some(m) if m >= self.cfg.stop_threshold => {}
                    _ => {
                        return Move {
                            local,
                            next: None,
                            dir: None,
                            stop: Some(StopReason::Mask),
                        }
                    }
                }
                let stop = (batch.n_steps(i) + 1 >= max_steps).then_some(StopReason::MaxLength);
                Move {
                    local,
                    next: Some(next),
                    dir: Some(a),
                    stop,
                }
            })
            .collect();

        let mut rewards = vec![0.0; batch.len()];
        let mut dones = vec![false; batch.len()];
        let mut finished = Vec::new();
        for (&i, m) in active.iter().zip(&moves) {
            if let (Some(next), Some(dir)) = (m.next, m.dir) {
                batch.points[i].push(next);
                batch.history[i].push_back(dir);
                if batch.history[i].len() > self.cfg.n_dirs {
                    batch.history[i].pop_front();
                }
            }
            rewards[i] = m.local;
            if let Some(reason) = m.stop {
                dones[i] = true;
                batch.alive[i] = false;
                let length = batch.n_steps(i) as f64 * self.cfg.step_size;
                let streamline = if batch.points[i].len() >= 2 {
                    Streamline::new(batch.points[i].clone()).ok()
                } else {
                    None
                };
                let valid = streamline.is_some() && length >= self.cfg.min_len;
                finished.push(Finished {
                    actor: i,
                    streamline,
                    valid,
                    reason,
                    bonus: 0.0,
                });
            }
        }

        // oracle bonus, scored in one batch; too-short streamlines are
        // discarded and never earn it
        if let Some(oracle) = self.oracle {
            if self.reward.oracle_bonus > 0.0 {
                let idx: Vec<usize> = (0..finished.len()).filter(|&k| finished[k].valid).collect();
                if !idx.is_empty() {
                    let lines: Vec<Streamline> =
                        idx.iter().map(|&k| finished[k].streamline.clone().unwrap()).collect();
                    let scores = oracle.score_batch(&lines)?;
                    for (&k, s) in idx.iter().zip(scores) {
                        let b = bonus_from_score(s, &self.reward);
                        finished[k].bonus = b;
                        rewards[finished[k].actor] += b;
                    }
                }
            }
        }
        Ok(StepOutput {
            active,
            rewards,
            dones,
            finished,
        })
    }

    /// States of the given actors, each `signal + 3 * n_dirs` long.
    pub fn states(&self, batch: &ActorBatch, actors: &[usize]) -> Result<Vec<Vec<f32>>> {
        let signals: Vec<Vec<f32>> = match self.cfg.state_mode {
            StateMode::Local6 => actors.par_iter().map(|&i| self.local6(batch.position(i))).collect(),
            StateMode::Encoded => self.encoded(batch, actors)?,
        };
        Ok(signals
            .into_iter()
            .zip(actors)
            .map(|(mut s, &i)| {
                s.reserve(3 * self.cfg.n_dirs);
                let h = &batch.history[i];
                for k in 0..self.cfg.n_dirs {
                    match h.len().checked_sub(k + 1).map(|j| h[j]) {
                        Some(d) => s.extend_from_slice(&[d.x as f32, d.y as f32, d.z as f32]),
                        None => s.extend_from_slice(&[0.0; 3]),
                    }
                }
                s
            })
            .collect())
    }

    /// Interpolated coefficients at `p` and its six axis neighbours; zero
    /// for neighbours outside the volume.
    pub fn local6(&self, p: Vec3) -> Vec<f32> {
        let offsets = [
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, -1.0),
        ];
        let mut out = Vec::with_capacity(LOCAL6_SIGNAL);
        let mut buf = [0.0; N_COEFFS];
        for o in offsets {
            if trilinear_into(&self.phantom.volume, p + o, &mut buf).is_err() {
                buf = [0.0; N_COEFFS];
            }
            out.extend(buf.iter().map(|&v| v as f32));
        }
        out
    }

    fn encoded(&self, batch: &ActorBatch, actors: &[usize]) -> Result<Vec<Vec<f32>>> {
        let enc = self
            .encoder
            .ok_or_else(|| Error::Config("encoded state mode needs an encoder".into()))?;
        let keys: Vec<[i64; 3]> = actors.iter().map(|&i| batch.position(i).nearest_voxel()).collect();
        let mut missing: Vec<[i64; 3]> = {
            let cache = self.latent_cache.lock().unwrap();
            keys.iter().filter(|k| !cache.contains_key(*k)).copied().collect()
        };
        missing.sort();
        missing.dedup();
        if !missing.is_empty() {
            let mut patches = Vec::with_capacity(missing.len() * N_COEFFS * PATCH * PATCH * PATCH);
            for &k in &missing {
                patches.extend(extract_patch(self.phantom, k));
            }
            let latents = enc.encode_patches(&patches, missing.len())?;
            let mut cache = self.latent_cache.lock().unwrap();
            for (k, l) in missing.iter().zip(latents.chunks(ENCODED_SIGNAL)) {
                cache.insert(*k, l.to_vec());
            }
        }
        let cache = self.latent_cache.lock().unwrap();
        Ok(keys.iter().map(|k| cache[k].clone()).collect())
    }
}

/// `28 x 9 x 9 x 9` window (channel, z, y, x) centred on voxel `c`,
/// zero outside the volume.
pub fn extract_patch(phantom: &Phantom, c: [i64; 3]) -> Vec<f32> {
    let vol = &phantom.volume;
    let dims = vol.dims();
    let h = (PATCH / 2) as i64;
    let n = PATCH * PATCH * PATCH;
    let mut out = vec![0.0f32; N_COEFFS * n];
    for dz in 0..PATCH as i64 {
        for dy in 0..PATCH as i64 {
            for dx in 0..PATCH as i64 {
                let (x, y, z) = (c[0] + dx - h, c[1] + dy - h, c[2] + dz - h);
                if x < 0 || y < 0 || z < 0 || x >= dims[0] as i64 || y >= dims[1] as i64 || z >= dims[2] as i64 {
                    continue;
                }
                let v = vol.coeffs(x as usize, y as usize, z as usize);
                let s = ((dz * PATCH as i64 + dy) * PATCH as i64 + dx) as usize;
                for (ch, &val) in v.iter().enumerate() {
                    out[ch * n + s] = val as f32;
                }
            }
        }
    }
    out
}
