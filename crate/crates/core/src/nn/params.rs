use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Grads, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named tensors of one model: trainable parameters plus buffers such as
/// batch-norm running statistics.
#[derive(Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list()
            .entries(self.entries.iter().map(|e| (&e.name, e.value.shape())))
            .finish()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces the value of a named entry, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::shape("set parameter", cur.shape(), value.shape()));
        }
        *self.get_mut(id) = value;
        Ok(())
    }

    /// Places every entry on the tape. Trainable entries become leaves when
    /// `grad` is true; everything else is a constant.
    pub fn bind(&self, tape: &mut Tape<T>, grad: bool, mode: Mode) -> Binding<T> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if grad && e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        let (train, seed) = match mode {
            Mode::Train { seed } => (true, seed),
            Mode::Eval => (false, 0),
        };
        Binding {
            vars,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    /// `target = tau * source + (1 - tau) * target` over all entries.
    pub fn polyak_from(&mut self, source: &ParamStore<T>, tau: f64) -> Result<()> {
        if self.entries.len() != source.entries.len() {
            return Err(Error::InvalidArgument("polyak: stores differ in size".into()));
        }
        let tau = T::c(tau);
        let keep = T::one() - tau;
        for (dst, src) in self.entries.iter_mut().zip(&source.entries) {
            if dst.value.shape() != src.value.shape() {
                return Err(Error::shape("polyak", dst.value.shape(), src.value.shape()));
            }
            for (d, &s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d = tau * s + keep * *d;
            }
        }
        Ok(())
    }

    /// Folds the batch statistics gathered during a train-mode forward pass
    /// into the running buffers.
    pub fn apply_bn_updates(&mut self, binding: &mut Binding<T>) {
        for u in binding.bn_updates.drain(..) {
            let m = T::c(u.momentum);
            let one_m = T::one() - m;
            let unbias = T::c(u.count as f64 / (u.count as f64 - 1.0));
            let rm = self.entries[u.mean.0].value.data_mut();
            for (r, &b) in rm.iter_mut().zip(&u.batch_mean) {
                *r = m * *r + one_m * b;
            }
            let rv = self.entries[u.var.0].value.data_mut();
            for (r, &b) in rv.iter_mut().zip(&u.batch_var) {
                *r = m * *r + one_m * b * unbias;
            }
        }
    }

    /// Hash of every entry's name, shape and bit pattern.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: &[u8]| {
            for &x in b {
                h ^= x as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for &d in e.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                eat(&v.f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// batch statistics, active dropout (masks drawn from `seed`)
    Train { seed: u64 },
    Eval,
}

pub(crate) struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub count: usize,
    pub momentum: f64,
}

/// A [`ParamStore`] placed on a tape for one forward pass.
pub struct Binding<T> {
    vars: Vec<Var>,
    train: bool,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Binding<T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Batch moments recorded by train-mode batch norms, in call order.
    pub fn batch_moments(&self) -> Vec<(Vec<T>, Vec<T>)> {
        self.bn_updates
            .iter()
            .map(|u| (u.batch_mean.clone(), u.batch_var.clone()))
            .collect()
    }

    /// Gradients for every store entry, in store order (`None` for entries
    /// that did not influence the loss or are not trainable).
    pub fn grads(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
