use rand::Rng;

use crate::error::{Error, Result};

/// Fixed-capacity FIFO store of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    len: usize,
    next: usize,
    states: Vec<f32>,
    next_states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    dones: Vec<f32>,
}

/// A sampled mini-batch, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub state_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub next_states: Vec<f32>,
    pub dones: Vec<f32>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize) -> Result<Self> {
        if capacity == 0 || state_dim == 0 {
            return Err(Error::Config("replay buffer capacity and state size must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            state_dim,
            len: 0,
            next: 0,
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn push(&mut self, s: &[f32], a: [f32; 3], r: f32, s2: &[f32], done: bool) -> Result<()> {
        if s.len() != self.state_dim || s2.len() != self.state_dim {
            return Err(Error::shape("replay push", &[s.len(), s2.len()], &[self.state_dim]));
        }
        if !r.is_finite() {
            return Err(Error::Numeric(format!("non-finite reward {r}")));
        }
        let d = self.state_dim;
        if self.len < self.capacity {
            self.states.extend_from_slice(s);
            self.next_states.extend_from_slice(s2);
            self.actions.extend_from_slice(&a);
            self.rewards.push(r);
            self.dones.push(done as u8 as f32);
            self.len += 1;
        } else {
            let i = self.next;
            self.states[i * d..(i + 1) * d].copy_from_slice(s);
            self.next_states[i * d..(i + 1) * d].copy_from_slice(s2);
            self.actions[i * 3..i * 3 + 3].copy_from_slice(&a);
            self.rewards[i] = r;
            self.dones[i] = done as u8 as f32;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Reward of the `i`-th stored slot (storage order, not age order).
    pub fn reward_at(&self, i: usize) -> f32 {
        self.rewards[i]
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.len == 0 {
            return Err(Error::Empty("replay buffer is empty".into()));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.len)).collect();
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let d = self.state_dim;
        let mut b = Batch {
            size: idx.len(),
            state_dim: d,
            states: Vec::with_capacity(idx.len() * d),
            actions: Vec::with_capacity(idx.len() * 3),
            rewards: Vec::with_capacity(idx.len()),
            next_states: Vec::with_capacity(idx.len() * d),
            dones: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            b.states.extend_from_slice(&self.states[i * d..(i + 1) * d]);
            b.next_states.extend_from_slice(&self.next_states[i * d..(i + 1) * d]);
            b.actions.extend_from_slice(&self.actions[i * 3..i * 3 + 3]);
            b.rewards.push(self.rewards[i]);
            b.dones.push(self.dones[i]);
        }
        b
    }
}
