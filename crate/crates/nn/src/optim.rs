//! Adam with decoupled weight decay.

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::Tensor;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// AdamW state. Parameters without a gradient in a step are left untouched,
/// including their decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, moments: HashMap::new() }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.moments.get(&id).map(|m| &m.m)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.moments.get(&id).map(|m| &m.v)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let mut ids: Vec<ParamId> = grads.param_ids().collect();
        ids.sort();
        for id in ids {
            let g = grads.param(id).expect("listed parameter has a gradient");
            let state = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape().to_vec()),
                v: Tensor::zeros(g.shape().to_vec()),
                steps: 0,
            });
            state.steps += 1;
            let bc1 = 1.0 - beta1.powi(state.steps as i32);
            let bc2 = 1.0 - beta2.powi(state.steps as i32);
            let p = store.value_mut(id);
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                *pv -= lr * weight_decay * *pv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
    }
}
