//! Transformer streamline classifier scoring anatomical plausibility.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{directions, resample, Streamline};
use crate::nn::{
    checkpoint, sinusoidal_encoding, Adam, Binding, LayerNorm, Linear, Mode, MultiHeadAttention, ParamId,
    ParamStore, Tape, Tensor, Var,
};
use crate::reward::StreamlineScorer;

/// rows per forward pass when scoring or accumulating gradients
const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub n_points: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            n_points: 32,
            embed_dim: 32,
            n_blocks: 4,
            n_heads: 4,
            ff_dim: 2048,
            lr: 5e-4,
            batch_size: 1024,
            epochs: 50,
            seed: 1111,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 {
            return Err(Error::Config("oracle n_points must be >= 2".into()));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.ff_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("oracle sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("oracle lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Streamlines with binary plausibility labels and split tags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub streamlines: Vec<Streamline>,
    pub labels: Vec<bool>,
    pub splits: Vec<Split>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn push(&mut self, s: Streamline, label: bool, split: Split) {
        self.streamlines.push(s);
        self.labels.push(label);
        self.splits.push(split);
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        let mut out = LabeledSet::default();
        for &i in idx {
            out.push(self.streamlines[i].clone(), self.labels[i], self.splits[i]);
        }
        out
    }

    /// Tags each class 80/10/10 train/val/test after a seeded shuffle.
    pub fn from_labeled(streamlines: Vec<Streamline>, labels: Vec<bool>, seed: u64) -> Result<Self> {
        if streamlines.len() != labels.len() {
            return Err(Error::InvalidArgument("streamline and label counts differ".into()));
        }
        let mut splits = vec![Split::Train; labels.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in [false, true] {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            for (k, &i) in idx.iter().enumerate() {
                splits[i] = split_for_rank(k, idx.len());
            }
        }
        Ok(LabeledSet {
            streamlines,
            labels,
            splits,
        })
    }
}

/// Split of the `k`-th of `n` shuffled items: first 80% train, next 10% val.
pub fn split_for_rank(k: usize, n: usize) -> Split {
    let n_train = (n * 8 + 5) / 10;
    let n_val = (n + 5) / 10;
    if k < n_train {
        Split::Train
    } else if k < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub precision: f64,
    pub f1: f64,
    pub n: usize,
}

impl BinaryMetrics {
    /// Metrics of scores thresholded at 0.5.
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Self {
        let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= 0.5, y) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
            }
        }
        let n = scores.len();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let sensitivity = ratio(tp, tp + fneg);
        let precision = ratio(tp, tp + fp);
        let f1 = if sensitivity + precision > 0.0 {
            2.0 * sensitivity * precision / (sensitivity + precision)
        } else {
            0.0
        };
        BinaryMetrics {
            accuracy: ratio(tp + tn, n),
            sensitivity,
            precision,
            f1,
            n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub test: BinaryMetrics,
    pub n_params: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct Oracle {
    pub cfg: OracleConfig,
    pub store: ParamStore<f32>,
    embed: Linear,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    pos: Tensor<f32>,
    adam: Adam<f32>,
    epochs_seen: usize,
}

impl Oracle {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let e = cfg.embed_dim;
        let embed = Linear::new(&mut store, "embed", 3, e, &mut rng);
        let cls = store.add_param("cls", crate::nn::normal_init(&[1, e], 0.02, &mut rng));
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), e),
                attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), e, cfg.n_heads, &mut rng)?,
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), e),
                ff1: Linear::new(&mut store, &format!("{p}.ff1"), e, cfg.ff_dim, &mut rng),
                ff2: Linear::new(&mut store, &format!("{p}.ff2"), cfg.ff_dim, e, &mut rng),
            });
        }
        let ln_f = LayerNorm::new(&mut store, "ln_f", e);
        let head = Linear::new(&mut store, "head", e, 1, &mut rng);
        let pos = sinusoidal_encoding(cfg.n_points, e);
        let adam = Adam::new(cfg.lr);
        Ok(Oracle {
            cfg,
            store,
            embed,
            cls,
            blocks,
            ln_f,
            head,
            pos,
            adam,
            epochs_seen: 0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn head_weights(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }

    /// Flattened `[n_points - 1, 3]` direction tokens of one streamline.
    pub fn tokens(&self, s: &Streamline) -> Result<Vec<f32>> {
        let d = directions(&resample(s, self.cfg.n_points)?)?;
        Ok(d.dirs.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect())
    }

    fn tokens_batch(&self, lines: &[Streamline]) -> Result<Vec<Vec<f32>>> {
        lines.par_iter().map(|s| self.tokens(s)).collect()
    }

    /// Logits `[B, 1]` for `B` token rows.
    fn forward(&self, tape: &mut Tape<f32>, bind: &Binding<f32>, tokens: &[&[f32]]) -> Result<Var> {
        let b = tokens.len();
        let n = self.cfg.n_points - 1;
        let e = self.cfg.embed_dim;
        let mut data = Vec::with_capacity(b * n * 3);
        for t in tokens {
            data.extend_from_slice(t);
        }
        let x = tape.constant(Tensor::new(vec![b, n, 3], data)?);
        let x = self.embed.forward(tape, bind, x)?;
        let cls = tape.tile0(bind.var(self.cls), b);
        let mut h = tape.concat(&[cls, x], 1)?;
        let pos = tape.constant(self.pos.clone());
        h = tape.add(h, pos)?;
        for blk in &self.blocks {
            let a = blk.ln1.forward(tape, bind, h)?;
            let a = blk.attn.forward(tape, bind, a)?;
            h = tape.add(h, a)?;
            let f = blk.ln2.forward(tape, bind, h)?;
            let f = blk.ff1.forward(tape, bind, f)?;
            let f = tape.relu(f);
            let f = blk.ff2.forward(tape, bind, f)?;
            h = tape.add(h, f)?;
        }
        let h = self.ln_f.forward(tape, bind, h)?;
        let c = tape.slice(h, 1, 0, 1)?;
        let c = tape.reshape(c, &[b, e])?;
        self.head.forward(tape, bind, c)
    }

    fn score_tokens(&self, tokens: &[Vec<f32>]) -> Result<Vec<f64>> {
        let chunks: Vec<Result<Vec<f64>>> = tokens
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let bind = self.store.bind(&mut tape, false, Mode::Eval);
                let rows: Vec<&[f32]> = chunk.iter().map(|t| t.as_slice()).collect();
                let logits = self.forward(&mut tape, &bind, &rows)?;
                let p = tape.sigmoid(logits);
                Ok(tape.value(p).data().iter().map(|&v| v as f64).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(tokens.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Plausibility score in [0, 1] of each streamline.
    pub fn score(&self, lines: &[Streamline]) -> Result<Vec<f64>> {
        let tokens = self.tokens_batch(lines)?;
        self.score_tokens(&tokens)
    }

    /// Mean-squared error of sigmoid outputs against 0/1 targets, and the
    /// store-aligned gradients. Rows are processed in fixed chunks whose
    /// gradients are summed, so the result is that of one full-batch pass.
    fn loss_and_grads(&self, tokens: &[&[f32]], targets: &[f32]) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
        let n = tokens.len();
        let parts: Vec<Result<(f64, Vec<Option<Tensor<f32>>>)>> = tokens
            .par_chunks(CHUNK)
            .zip(targets.par_chunks(CHUNK))
            .map(|(rows, ys)| {
                let mut tape = Tape::new();
                let bind = self.store.bind(&mut tape, true, Mode::Train { seed: 0 });
                let logits = self.forward(&mut tape, &bind, rows)?;
                let p = tape.sigmoid(logits);
                let y = tape.constant(Tensor::new(vec![ys.len(), 1], ys.to_vec())?);
                let d = tape.sub(p, y)?;
                let sq = tape.square(d);
                let s = tape.sum(sq);
                let loss = tape.scale(s, 1.0 / n as f32);
                let mut g = tape.backward(loss)?;
                Ok((tape.value(loss).item() as f64, bind.grads(&mut g)))
            })
            .collect();
        let mut total = 0.0;
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; self.store.len()];
        for part in parts {
            let (l, g) = part?;
            total += l;
            for (a, gi) in acc.iter_mut().zip(g) {
                match (a.as_mut(), gi) {
                    (Some(a), Some(gi)) => {
                        for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                            *x += *y;
                        }
                    }
                    (None, Some(gi)) => *a = Some(gi),
                    _ => {}
                }
            }
        }
        Ok((total, acc))
    }

    /// One pass over `idx` in shuffled mini-batches; returns the mean loss.
    fn run_epoch(&mut self, tokens: &[Vec<f32>], labels: &[bool], idx: &[usize]) -> Result<f64> {
        let mut order = idx.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (0x9e37_79b9 * (self.epochs_seen as u64 + 1)));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let rows: Vec<&[f32]> = batch.iter().map(|&i| tokens[i].as_slice()).collect();
            let ys: Vec<f32> = batch.iter().map(|&i| labels[i] as u8 as f32).collect();
            let (loss, grads) = self.loss_and_grads(&rows, &ys)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("oracle loss is {loss} at epoch {}", self.epochs_seen)));
            }
            self.adam.step(&mut self.store, &grads)?;
            total += loss * batch.len() as f64;
        }
        self.epochs_seen += 1;
        Ok(total / idx.len().max(1) as f64)
    }

    fn evaluate(&self, tokens: &[Vec<f32>], labels: &[bool], idx: &[usize]) -> Result<(f64, BinaryMetrics)> {
        let sub: Vec<Vec<f32>> = idx.iter().map(|&i| tokens[i].clone()).collect();
        let ys: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let scores = self.score_tokens(&sub)?;
        let mse = scores
            .iter()
            .zip(&ys)
            .map(|(s, &y)| (s - y as u8 as f64).powi(2))
            .sum::<f64>()
            / scores.len().max(1) as f64;
        Ok((mse, BinaryMetrics::from_scores(&scores, &ys)))
    }

    /// Full training run: `cfg.epochs` epochs on the train split, keeping
    /// the parameters of the epoch with the lowest validation loss.
    pub fn train(&mut self, data: &LabeledSet) -> Result<TrainReport> {
        let train = data.indices(Split::Train);
        check_two_classes(data, &train)?;
        let mut val = data.indices(Split::Val);
        if val.is_empty() {
            val = train.clone();
        }
        let test = data.indices(Split::Test);
        let tokens = self.tokens_batch(&data.streamlines)?;
        let mut logs = Vec::with_capacity(self.cfg.epochs);
        let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
        for epoch in 0..self.cfg.epochs {
            let train_loss = self.run_epoch(&tokens, &data.labels, &train)?;
            let (val_loss, val_m) = self.evaluate(&tokens, &data.labels, &val)?;
            log::info!(
                "oracle epoch {epoch}: train {train_loss:.5} val {val_loss:.5} acc {:.4}",
                val_m.accuracy
            );
            logs.push(EpochLog {
                epoch,
                train_loss,
                val_loss,
                val_accuracy: val_m.accuracy,
            });
            if best.as_ref().map_or(true, |b| val_loss < b.0) {
                best = Some((val_loss, epoch, self.store.clone()));
            }
        }
        let best_epoch = match best {
            Some((_, e, store)) => {
                self.store = store;
                e
            }
            None => 0,
        };
        let test_m = if test.is_empty() {
            BinaryMetrics::default()
        } else {
            self.evaluate(&tokens, &data.labels, &test)?.1
        };
        Ok(TrainReport {
            epochs: logs,
            best_epoch,
            test: test_m,
            n_params: self.n_params(),
        })
    }

    /// Continues training on the train split of `data` for `epochs` epochs,
    /// keeping parameters and optimizer moments.
    pub fn finetune(&mut self, data: &LabeledSet, epochs: usize) -> Result<Vec<f64>> {
        if epochs == 0 {
            return Err(Error::InvalidArgument("finetune needs at least one epoch".into()));
        }
        let train = data.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Empty("oracle fine-tuning set is empty".into()));
        }
        let tokens = self.tokens_batch(&data.streamlines)?;
        (0..epochs)
            .map(|_| self.run_epoch(&tokens, &data.labels, &train))
            .collect()
    }

    /// Metrics on the given split.
    pub fn metrics(&self, data: &LabeledSet, split: Split) -> Result<BinaryMetrics> {
        let idx = data.indices(split);
        let sub = data.subset(&idx);
        self.metrics_all(&sub)
    }

    /// Metrics over every record regardless of split.
    pub fn metrics_all(&self, data: &LabeledSet) -> Result<BinaryMetrics> {
        let scores = self.score(&data.streamlines)?;
        Ok(BinaryMetrics::from_scores(&scores, &data.labels))
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.steps()
    }

    /// Writes parameters to `path` and the configuration to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(path, &self.store)?;
        let cfg = serde_json::to_string_pretty(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(config_path(path), cfg)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(config_path(path))?;
        let cfg: OracleConfig = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut o = Oracle::new(cfg)?;
        checkpoint::load_store(path, &mut o.store)?;
        Ok(o)
    }
}

fn config_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn check_two_classes(data: &LabeledSet, idx: &[usize]) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Empty("oracle training split is empty".into()));
    }
    let pos = idx.iter().filter(|&&i| data.labels[i]).count();
    if pos == 0 || pos == idx.len() {
        return Err(Error::InvalidArgument("oracle training split has a single class".into()));
    }
    Ok(())
}

impl StreamlineScorer for Oracle {
    fn score_batch(&self, streamlines: &[Streamline]) -> Result<Vec<f64>> {
        self.score(streamlines)
    }
}
