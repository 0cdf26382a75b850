use std::collections::HashMap;

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    step: u32,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: HashMap::new(),
        }
    }

    /// Apply one update with learning rate `lr` to every trainable parameter
    /// that received a gradient. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) {
        let c = self.config;
        let mut ids: Vec<ParamId> = grads.params().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.param(id).expect("listed gradient").data();
            let p = store.value_mut(id).data_mut();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let decay = 1.0 - lr * c.weight_decay;
            for i in 0..p.len() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
