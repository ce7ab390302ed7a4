use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias correction and decoupled weight decay (0 by default).
///
/// Moment estimates live here rather than in the [`ParamStore`], so a fresh
/// optimizer restarts bias correction while the store's step counter keeps
/// counting.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.arrays().iter().map(|a| vec![0.0; a.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f32) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if grads.arrays.len() != store.len() {
            return Err(Error::Dimension {
                context: "gradient array count".into(),
                expected: store.len(),
                got: grads.arrays.len(),
            });
        }
        for (i, g) in grads.arrays.iter().enumerate() {
            let a = store.at(i);
            if g.len() != a.len() {
                return Err(Error::Dimension {
                    context: format!("gradient for `{}`", a.name),
                    expected: a.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    name: a.name.clone(),
                    reason: "non-finite gradient".into(),
                });
            }
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = lr / bc1;
        let inv_bc2 = 1.0 / bc2;
        let decay = 1.0 - lr * self.weight_decay;
        for (i, g) in grads.arrays.iter().enumerate() {
            let p = store.data_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let denom = (v[j] * inv_bc2).sqrt() + self.eps;
                p[j] = p[j] * decay - step * m[j] / denom;
            }
        }
        store.bump_step();
        Ok(())
    }
}

/// One optimizer update; see [`Adam::step`].
pub fn adam_step(opt: &mut Adam, store: &mut ParamStore, grads: &Grads, lr: f32) -> Result<()> {
    opt.step(store, grads, lr)
}
