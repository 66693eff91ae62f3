//! Iterative reward training: alternate agent training, tractogram
//! generation, reference labeling, and oracle fine-tuning.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::train::{episode_seeds, track, train, EpisodeLog, TrainConfig};
use crate::agents::{Agent, ReplayBuffer};
use crate::env::{Env, EnvConfig, PatchEncoder};
use crate::error::{Error, Result};
use crate::field::Phantom;
use crate::geometry::{resample, Streamline};
use crate::nn::Scalar;
use crate::oracle::{split_for_rank, BinaryMetrics, LabeledSet, Oracle, Split};
use crate::reward::RewardConfig;
use crate::scoring::{rois_at, RoiEnd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrtConfig {
    pub warmup_episodes: usize,
    /// agent episodes between two oracle updates
    pub agent_episodes_per_iter: usize,
    pub n_iters: usize,
    pub streamlines_per_iter: usize,
    pub dataset_cap: usize,
    pub oracle_epochs_first: usize,
    pub oracle_epochs_later: usize,
    /// actors per training episode, 0 for every seed
    pub n_actors: usize,
    /// minimum fraction of resampled points inside the bundle mask
    pub in_mask_fraction: f64,
    /// points used for the in-mask test
    pub label_points: usize,
    pub seed: u64,
}

impl Default for IrtConfig {
    fn default() -> Self {
        IrtConfig {
            warmup_episodes: 150,
            agent_episodes_per_iter: 50,
            n_iters: 60,
            streamlines_per_iter: 25_000,
            dataset_cap: 400_000,
            oracle_epochs_first: 5,
            oracle_epochs_later: 1,
            n_actors: 256,
            in_mask_fraction: 0.9,
            label_points: 64,
            seed: 1111,
        }
    }
}

impl IrtConfig {
    /// Published generation and dataset sizes.
    pub fn published_scale() -> Self {
        IrtConfig {
            streamlines_per_iter: 250_000,
            dataset_cap: 4_000_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("irt: {m}")));
        if self.n_iters == 0 {
            return bad("n_iters must be positive");
        }
        if self.streamlines_per_iter == 0 || self.dataset_cap < 2 {
            return bad("streamlines_per_iter and dataset_cap must be positive");
        }
        if self.oracle_epochs_first == 0 || self.oracle_epochs_later == 0 {
            return bad("oracle epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.in_mask_fraction) {
            return bad("in_mask_fraction must lie in [0, 1]");
        }
        if self.label_points < 2 {
            return bad("label_points must be at least 2");
        }
        Ok(())
    }

    /// Oracle epochs at 1-based iteration `iter`.
    pub fn oracle_epochs(&self, iter: usize) -> usize {
        if iter <= 1 {
            self.oracle_epochs_first
        } else {
            self.oracle_epochs_later
        }
    }

    /// Warmup plus the agent episodes that follow each oracle update.
    pub fn total_episodes(&self) -> usize {
        self.warmup_episodes + self.n_iters * self.agent_episodes_per_iter
    }
}

/// Ground-truth stand-in for an external bundle filter.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceFilter<'a> {
    pub phantom: &'a Phantom,
    pub in_mask_fraction: f64,
    pub n_points: usize,
}

impl ReferenceFilter<'_> {
    /// Plausible iff the endpoints join the head and tail of one bundle and
    /// enough resampled points fall inside that bundle's mask.
    pub fn label(&self, s: &Streamline) -> Result<bool> {
        let a = rois_at(self.phantom, s.first());
        let b = rois_at(self.phantom, s.last());
        if a.is_empty() || b.is_empty() {
            return Ok(false);
        }
        let pts = resample(s, self.n_points)?;
        for (i, bundle) in self.phantom.bundles.iter().enumerate() {
            let joins = |x: &[_], y: &[_]| x.contains(&(i, RoiEnd::Head)) && y.contains(&(i, RoiEnd::Tail));
            if !(joins(&a, &b) || joins(&b, &a)) {
                continue;
            }
            let inside = pts
                .points()
                .iter()
                .filter(|p| bundle.mask.contains_voxel(p.nearest_voxel()))
                .count();
            if inside as f64 >= self.in_mask_fraction * pts.len() as f64 {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

pub fn reference_label(filter: &ReferenceFilter, lines: &[Streamline]) -> Result<Vec<bool>> {
    use rayon::prelude::*;
    lines.par_iter().map(|s| filter.label(s)).collect()
}

/// Keeps a random subset of the larger class so both classes have the size
/// of the smaller one. Returns `None` when one class is absent.
pub fn balance(
    lines: Vec<Streamline>,
    labels: &[bool],
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Streamline>, Vec<Streamline>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (s, &l) in lines.into_iter().zip(labels) {
        if l {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let n = pos.len().min(neg.len());
    for class in [&mut pos, &mut neg] {
        class.shuffle(rng);
        class.truncate(n);
    }
    Some((pos, neg))
}

/// Class-balanced labeled records with per-class FIFO eviction.
#[derive(Debug, Clone, Default)]
pub struct IrtDataset {
    cap: usize,
    plausible: VecDeque<(Streamline, Split)>,
    implausible: VecDeque<(Streamline, Split)>,
}

impl IrtDataset {
    pub fn new(cap: usize) -> Self {
        IrtDataset {
            cap,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.plausible.len() + self.implausible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_counts(&self) -> (usize, usize) {
        (self.plausible.len(), self.implausible.len())
    }

    /// Appends two equally sized classes, each split 80/10/10 in its given
    /// order, then evicts the oldest records of each class past the cap.
    pub fn append(&mut self, pos: Vec<Streamline>, neg: Vec<Streamline>) -> Result<()> {
        if pos.len() != neg.len() {
            return Err(Error::InvalidArgument(format!(
                "unbalanced append: {} vs {}",
                pos.len(),
                neg.len()
            )));
        }
        let n = pos.len();
        let per_class = self.cap / 2;
        for (queue, items) in [(&mut self.plausible, pos), (&mut self.implausible, neg)] {
            for (k, s) in items.into_iter().enumerate() {
                queue.push_back((s, split_for_rank(k, n)));
            }
            while queue.len() > per_class {
                queue.pop_front();
            }
        }
        Ok(())
    }

    pub fn to_labeled(&self) -> LabeledSet {
        let mut out = LabeledSet::default();
        for (s, split) in &self.plausible {
            out.push(s.clone(), true, *split);
        }
        for (s, split) in &self.implausible {
            out.push(s.clone(), false, *split);
        }
        out
    }

    /// Rebuilds a dataset from a labeled set, keeping record order per class.
    pub fn from_labeled(data: &LabeledSet, cap: usize) -> Self {
        let mut out = IrtDataset::new(cap);
        for i in 0..data.len() {
            let rec = (data.streamlines[i].clone(), data.splits[i]);
            if data.labels[i] {
                out.plausible.push_back(rec);
            } else {
                out.implausible.push_back(rec);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtIterLog {
    pub iter: usize,
    pub episodes_total: usize,
    pub n_generated: usize,
    pub n_plausible: usize,
    pub n_implausible: usize,
    /// records appended per class; 0 when one class was missing
    pub retained_per_class: usize,
    /// accuracy on the balanced fresh set, before fine-tuning
    pub accuracy: f64,
    /// accuracy on every freshly generated streamline
    pub raw_accuracy: f64,
    pub fresh: BinaryMetrics,
    pub dataset_len: usize,
    pub oracle_epochs: usize,
    pub finetune_losses: Vec<f64>,
    pub last_episode: Option<EpisodeLog>,
}

/// Environment pieces shared by every phase.
#[derive(Clone, Copy)]
pub struct IrtEnv<'a> {
    pub phantom: &'a Phantom,
    pub env: &'a EnvConfig,
    pub reward: &'a RewardConfig,
    pub encoder: Option<&'a dyn PatchEncoder>,
}

impl<'a> IrtEnv<'a> {
    fn build<'b>(&self, oracle: Option<&'b Oracle>) -> Result<Env<'b>>
    where
        'a: 'b,
    {
        let mut env = Env::new(self.phantom, self.env.clone(), self.reward.clone())?;
        if let Some(o) = oracle {
            env = env.with_oracle(o);
        }
        if let Some(e) = self.encoder {
            env = env.with_encoder(e);
        }
        Ok(env)
    }
}

/// Tracks from fresh seeds with the stochastic policy until `n`
/// streamlines have been produced.
pub fn generate<T: Scalar>(agent: &Agent<T>, env: &Env, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Streamline>> {
    const MAX_EMPTY_PASSES: usize = 20;
    let mut out = Vec::with_capacity(n);
    let mut empty = 0;
    while out.len() < n {
        let seeds = episode_seeds(env, 0, rng)?;
        let lines = track(agent, env, &seeds, true, rng)?;
        if lines.is_empty() {
            empty += 1;
            if empty >= MAX_EMPTY_PASSES {
                return Err(Error::Numeric(format!(
                    "generation produced no valid streamline in {MAX_EMPTY_PASSES} passes"
                )));
            }
        }
        out.extend(lines);
    }
    out.truncate(n);
    Ok(out)
}

/// Warmup, then per iteration: generate, label, fine-tune the oracle, and
/// train the agent against the updated oracle. `dataset` may hold records
/// from an earlier run;
/// `on_iter` sees each iteration log once it is complete.
#[allow(clippy::too_many_arguments)]
pub fn irt_run<T: Scalar>(
    agent: &mut Agent<T>,
    buffer: &mut ReplayBuffer,
    oracle: &mut Oracle,
    dataset: &mut IrtDataset,
    setup: IrtEnv,
    cfg: &IrtConfig,
    on_iter: &mut dyn FnMut(&IrtIterLog, &Agent<T>, &Oracle, &IrtDataset) -> Result<()>,
) -> Result<Vec<IrtIterLog>> {
    cfg.validate()?;
    let filter = ReferenceFilter {
        phantom: setup.phantom,
        in_mask_fraction: cfg.in_mask_fraction,
        n_points: cfg.label_points,
    };
    let mut logs = Vec::with_capacity(cfg.n_iters);
    let mut episode = 0;
    let mut run_agent = |agent: &mut Agent<T>, buffer: &mut ReplayBuffer, oracle: &Oracle, n_ep: usize| {
        if n_ep == 0 {
            return Ok(None);
        }
        let env = setup.build(Some(oracle))?;
        let tc = TrainConfig {
            episodes: n_ep,
            n_actors: cfg.n_actors,
            seed: cfg.seed,
            collect_only: false,
            start_episode: episode,
        };
        let ep_logs = train(agent, buffer, &env, &tc, &mut |_, _| Ok(()))?;
        episode += n_ep;
        Ok::<_, Error>(ep_logs.last().cloned())
    };
    run_agent(agent, buffer, oracle, cfg.warmup_episodes)?;
    for iter in 1..=cfg.n_iters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((1u64 << 32) | iter as u64);
        let env = setup.build(None)?;
        let lines = generate(agent, &env, cfg.streamlines_per_iter, &mut rng)?;
        let labels = reference_label(&filter, &lines)?;
        let n_pos = labels.iter().filter(|&&l| l).count();
        let scores = oracle.score(&lines)?;
        let raw = BinaryMetrics::from_scores(&scores, &labels);
        let n_generated = lines.len();

        let (retained, fresh) = match balance(lines, &labels, &mut rng) {
            Some((pos, neg)) => {
                let n = pos.len();
                let mut fresh_set = LabeledSet::default();
                for s in pos.iter() {
                    fresh_set.push(s.clone(), true, Split::Test);
                }
                for s in neg.iter() {
                    fresh_set.push(s.clone(), false, Split::Test);
                }
                let m = oracle.metrics_all(&fresh_set)?;
                dataset.append(pos, neg)?;
                (n, m)
            }
            None => {
                log::warn!("irt iteration {iter}: generated streamlines form a single class; skipping append");
                (0, raw)
            }
        };

        let epochs = cfg.oracle_epochs(iter);
        let data = dataset.to_labeled();
        let finetune_losses = if data.indices(Split::Train).is_empty() {
            log::warn!("irt iteration {iter}: dataset is empty; oracle left unchanged");
            Vec::new()
        } else {
            oracle.finetune(&data, epochs)?
        };
        let last_episode = run_agent(agent, buffer, oracle, cfg.agent_episodes_per_iter)?;
        let log = IrtIterLog {
            iter,
            episodes_total: cfg.warmup_episodes + iter * cfg.agent_episodes_per_iter,
            n_generated,
            n_plausible: n_pos,
            n_implausible: n_generated - n_pos,
            retained_per_class: retained,
            accuracy: fresh.accuracy,
            raw_accuracy: raw.accuracy,
            fresh,
            dataset_len: dataset.len(),
            oracle_epochs: epochs,
            finetune_losses,
            last_episode,
        };
        log::info!(
            "irt iteration {iter}: generated {n_generated} plausible {n_pos} accuracy {:.4} dataset {}",
            log.accuracy,
            log.dataset_len
        );
        on_iter(&log, agent, oracle, dataset)?;
        logs.push(log);
    }
    Ok(logs)
}
