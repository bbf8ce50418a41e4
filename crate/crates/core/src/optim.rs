//! Optimizers and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at `total` epochs.
pub fn cosine_lr(epoch: f64, total: f64, lr0: f64, lr_min: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    let t = (epoch / total).clamp(0.0, 1.0);
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
}

/// `lr0 * gamma^k` where `k` is the number of milestones already reached.
pub fn step_lr(epoch: usize, lr0: f64, milestones: &[usize], gamma: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    lr0 * gamma.powi(k as i32)
}

/// Named per-parameter state vectors, persisted in checkpoints.
pub type OptimState = BTreeMap<String, Vec<f64>>;

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let name = store.entry(*id).name.clone();
            let p = store.get_mut(*id);
            let mut d = g.clone();
            for (dv, pv) in d.data_mut().iter_mut().zip(p.data()) {
                *dv += self.weight_decay * pv;
            }
            let buf = match self.buffers.get_mut(&name) {
                Some(buf) => {
                    for (b, dv) in buf.data_mut().iter_mut().zip(d.data()) {
                        *b = self.momentum * *b + dv;
                    }
                    buf
                }
                None => self.buffers.entry(name).or_insert(d),
            };
            for (pv, b) in p.data_mut().iter_mut().zip(buf.data()) {
                *pv -= lr * b;
            }
        }
    }

    pub fn state(&self) -> OptimState {
        self.buffers
            .iter()
            .map(|(k, v)| (format!("momentum:{k}"), v.data().to_vec()))
            .collect()
    }

    pub fn load_state(&mut self, state: &OptimState, store: &ParamStore) {
        self.buffers.clear();
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("momentum:") {
                if let Some(id) = store.id(name) {
                    let shape = store.get(id).shape().to_vec();
                    self.buffers.insert(name.to_string(), Tensor::new(shape, v.clone()));
                }
            }
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    m: BTreeMap<String, Tensor>,
    #[serde(skip)]
    v: BTreeMap<String, Tensor>,
    #[serde(skip)]
    t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let name = store.entry(*id).name.clone();
            let p = store.get_mut(*id);
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let t = self.t.entry(name).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + self.weight_decay * *pv;
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn state(&self) -> OptimState {
        let mut out = OptimState::new();
        for (k, v) in &self.m {
            out.insert(format!("m:{k}"), v.data().to_vec());
        }
        for (k, v) in &self.v {
            out.insert(format!("v:{k}"), v.data().to_vec());
        }
        for (k, t) in &self.t {
            out.insert(format!("t:{k}"), vec![*t as f64]);
        }
        out
    }

    pub fn load_state(&mut self, state: &OptimState, store: &ParamStore) {
        self.m.clear();
        self.v.clear();
        self.t.clear();
        for (k, data) in state {
            let Some((kind, name)) = k.split_once(':') else { continue };
            let Some(id) = store.id(name) else { continue };
            let shape = store.get(id).shape().to_vec();
            match kind {
                "m" => {
                    self.m.insert(name.into(), Tensor::new(shape, data.clone()));
                }
                "v" => {
                    self.v.insert(name.into(), Tensor::new(shape, data.clone()));
                }
                "t" => {
                    self.t.insert(name.into(), data[0] as u64);
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0.0, 200.0, 0.1, 0.001) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(200.0, 200.0, 0.1, 0.001) - 0.001).abs() < 1e-12);
        let mid = cosine_lr(100.0, 200.0, 0.1, 0.001);
        assert!((mid - 0.0505).abs() < 1e-12);
    }

    #[test]
    fn step_decay_milestones() {
        let lr = |e| step_lr(e, 0.02, &[60, 150], 0.1);
        assert_eq!(lr(0), 0.02);
        assert!((lr(59) - 0.02).abs() < 1e-15);
        assert!((lr(60) - 0.002).abs() < 1e-15);
        assert!((lr(150) - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", crate::nn::ParamGroup::Weight, Tensor::from_vec(vec![1.0, -1.0]));
        let mut adam = Adam::new(0.9, 0.999, 0.0);
        adam.step(&mut store, &[(id, Tensor::from_vec(vec![0.5, -2.0]))], 0.01);
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("p", crate::nn::ParamGroup::Weight, Tensor::from_vec(vec![0.0]));
        let mut sgd = Sgd::new(0.9, 0.0);
        let g = [(id, Tensor::from_vec(vec![1.0]))];
        sgd.step(&mut store, &g, 0.1);
        sgd.step(&mut store, &g, 0.1);
        // -0.1 then -0.1*(0.9+1)
        assert!((store.get(id).data()[0] + 0.29).abs() < 1e-12);
    }
}
