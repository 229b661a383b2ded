use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam over a fixed subset of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore<f32>, params: Vec<ParamId>) -> Self {
        let m: Vec<_> = params
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Adam {
            cfg,
            v: m.clone(),
            m,
            params,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grad(id)` returns `None` for parameters the loss did not
    /// reach; they are treated as having zero gradient.
    pub fn step<'g>(
        &mut self,
        store: &mut ParamStore<f32>,
        mut grad: impl FnMut(ParamId) -> Option<&'g Tensor<f32>>,
    ) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (k, &id) in self.params.iter().enumerate() {
            let g = grad(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            match g {
                Some(g) => {
                    for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    }
                }
                None => {
                    for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                        *mi *= b1;
                        *vi *= b2;
                    }
                }
            }
            let p = store.get_mut(id).data_mut();
            for ((pi, &mi), &vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                *pi -= step_size * mi / (vi.sqrt() / bc2_sqrt + eps as f32);
            }
        }
    }

    /// Moment tensors under `<prefix>.m.<param>` / `<prefix>.v.<param>`.
    pub fn export(&self, prefix: &str, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for (k, &id) in self.params.iter().enumerate() {
            out.push((format!("{prefix}.m.{}", store.name(id)), self.m[k].clone()));
            out.push((format!("{prefix}.v.{}", store.name(id)), self.v[k].clone()));
        }
        out
    }

    pub fn import(
        &mut self,
        prefix: &str,
        store: &ParamStore<f32>,
        lookup: &std::collections::HashMap<&str, &Tensor<f32>>,
        step: u64,
    ) -> Result<()> {
        let mut m = Vec::with_capacity(self.params.len());
        let mut v = Vec::with_capacity(self.params.len());
        for (k, &id) in self.params.iter().enumerate() {
            for (dst, tag) in [(&mut m, "m"), (&mut v, "v")] {
                let key = format!("{prefix}.{tag}.{}", store.name(id));
                let t = lookup
                    .get(key.as_str())
                    .ok_or_else(|| Error::load("checkpoint", format!("missing optimizer state {key}")))?;
                if t.shape() != self.m[k].shape() {
                    return Err(Error::load("checkpoint", format!("optimizer state {key} has wrong shape")));
                }
                dst.push((*t).clone());
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}
