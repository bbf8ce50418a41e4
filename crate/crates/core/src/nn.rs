//! Parameter storage, forward contexts and the handful of layers the
//! networks are assembled from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, Gradients, Tape, Var};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Operation parameters (ω), architecture parameters (α), or non-trainable
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Weight,
    Arch,
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of scalars in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn snapshot(&self, group: ParamGroup) -> Vec<Tensor> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.clone())
            .collect()
    }

    /// Copies every same-named, same-shaped tensor from `other`; returns how
    /// many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(&j) = other.by_name.get(&e.name) {
                let src = &other.entries[j].value;
                if src.shape() == e.value.shape() {
                    e.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// What a forward pass should do about gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    None,
    Weights,
    Arch,
    All,
}

impl GradTarget {
    fn wants(self, group: ParamGroup) -> bool {
        match (self, group) {
            (_, ParamGroup::Buffer) => false,
            (GradTarget::All, _) => true,
            (GradTarget::Weights, ParamGroup::Weight) => true,
            (GradTarget::Arch, ParamGroup::Arch) => true,
            _ => false,
        }
    }
}

/// State for one forward (and optional backward) pass over a [`ParamStore`].
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    target: GradTarget,
    train: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, train: bool, target: GradTarget, seed: u64) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            target,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    /// Evaluation mode, no gradients.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, false, GradTarget::None, 0)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self
            .tape
            .leaf(entry.value.clone(), self.target.wants(entry.group));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.dropout(x, mask)
    }

    /// Backpropagates from `loss` and returns gradients of every bound
    /// parameter in the selected groups, in parameter order.
    pub fn gradients(&self, loss: Var) -> Vec<(ParamId, Tensor)> {
        let mut grads: Gradients = self.tape.backward(loss);
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = v else { continue };
            if !self.tape.requires_grad(*v) {
                continue;
            }
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(self.tape.shape(*v)));
            out.push((ParamId(i), g));
        }
        out
    }

    /// Ends the pass, returning the batch statistics observed by train-mode
    /// batch norms.
    pub fn into_bn_updates(self) -> BnUpdates {
        BnUpdates(self.bn_updates)
    }
}

/// Batch statistics collected during one pass, not yet folded into the
/// running buffers.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)>);

impl BnUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(self, store: &mut ParamStore) {
        for (mean_id, var_id, mean, var) in self.0 {
            for (r, m) in store.get_mut(mean_id).data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in store.get_mut(var_id).data_mut().iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

/// Creates parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.path(name);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        let path = self.path(name);
        self.store.add(path, group, value)
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut *self.rng)).collect();
        self.tensor(name, ParamGroup::Weight, Tensor::new(shape.to_vec(), data))
    }

    /// Convolution weight `[cout, cin/groups, k, k]`, Kaiming-normal with
    /// fan-out `cout*k*k`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec) -> Conv2d {
        assert_eq!(cin % spec.groups, 0);
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        let w = self.gaussian(name, &[cout, cin / spec.groups, k, k], std);
        Conv2d { w, spec }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> BatchNorm2d {
        let mut b = self.sub(name);
        BatchNorm2d {
            gamma: b.tensor("weight", ParamGroup::Weight, Tensor::full(&[c], 1.0)),
            beta: b.tensor("bias", ParamGroup::Weight, Tensor::zeros(&[c])),
            running_mean: b.tensor("running_mean", ParamGroup::Buffer, Tensor::zeros(&[c])),
            running_var: b.tensor("running_var", ParamGroup::Buffer, Tensor::full(&[c], 1.0)),
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool, std: f64) -> Linear {
        let mut b = self.sub(name);
        let w = b.gaussian("weight", &[dout, din], std);
        let bias = bias.then(|| b.tensor("bias", ParamGroup::Weight, Tensor::zeros(&[dout])));
        Linear { w, b: bias }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.w);
        ctx.tape.conv2d(x, w, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, BN_EPS);
            ctx.bn_updates
                .push((self.running_mean, self.running_var, stats.mean, stats.var_unbiased));
            y
        } else {
            let mean = ctx.store.get(self.running_mean).data().to_vec();
            let var = ctx.store.get(self.running_var).data().to_vec();
            ctx.tape.channel_affine(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

/// ReLU -> conv -> BN, the basic unit used for projections.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ReluConvBn {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec) -> Self {
        let mut s = b.sub(name);
        ReluConvBn {
            conv: s.conv("conv", cin, cout, k, spec),
            bn: s.bn("bn", cout),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let x = ctx.tape.relu(x);
        let x = self.conv.forward(ctx, x);
        self.bn.forward(ctx, x)
    }
}
