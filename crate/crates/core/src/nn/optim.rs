use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` is aligned with the store entries; entries with
    /// no gradient or that are not trainable are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let bc1 = T::c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::c(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::c(self.lr);
        let eps = T::c(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            if g.numel() != p.len() {
                return Err(Error::shape("adam", &[p.len()], g.shape()));
            }
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, used where a fixed-step reference is handy.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
    let lr = T::c(lr);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if let Some(g) = &grads[i] {
            if store.is_trainable(id) {
                for (p, &gv) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
        }
    }
}
