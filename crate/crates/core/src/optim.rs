//! AdamW over the trainable parameters of a [`ParamStore`].

use alloc::vec::Vec;

use crate::param::{ComponentTag, ParamId, ParamStore};
use crate::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    id: ParamId,
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u32,
    state: Vec<Moments>,
}

impl AdamW {
    /// Allocates first/second moment buffers for every trainable parameter.
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let state = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| Moments {
                id,
                m: alloc::vec![0.0; p.len()],
                v: alloc::vec![0.0; p.len()],
            })
            .collect();
        AdamW {
            config,
            step: 0,
            state,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Moment-buffer bytes per component.
    pub fn state_bytes(&self, store: &ParamStore) -> [u64; 5] {
        let mut out = [0u64; 5];
        for s in &self.state {
            out[store.get(s.id).tag.index()] += 4 * (s.m.len() + s.v.len()) as u64;
        }
        out
    }

    pub fn state_bytes_total(&self) -> u64 {
        self.state.iter().map(|s| 4 * (s.m.len() + s.v.len()) as u64).sum()
    }

    /// One update. Parameters without a gradient entry still receive decay
    /// and moment decay, as in the reference AdamW with zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::powf(c.beta1, self.step as f32);
        let bc2 = 1.0 - libm::powf(c.beta2, self.step as f32);
        for s in &mut self.state {
            if !store.get(s.id).trainable {
                continue;
            }
            let g = grads.get_id(s.id);
            let p = store.value_mut(s.id);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * gi;
                s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = s.m[i] / bc1;
                let vhat = s.v[i] / bc2;
                p[i] -= c.lr * c.weight_decay * p[i];
                p[i] -= c.lr * mhat / (libm::sqrtf(vhat) + c.eps);
            }
        }
    }

    pub fn tags(&self, store: &ParamStore) -> Vec<ComponentTag> {
        self.state.iter().map(|s| store.get(s.id).tag).collect()
    }
}
