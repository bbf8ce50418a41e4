//! A small define-by-run reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node that
//! depends on a leaf created with `requires_grad`.

mod kernels;

pub use kernels::Conv2dSpec;

use crate::tensor::Tensor;
use kernels::dims4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddConst(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, invstd: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, invstd: Vec<f64> },
    MaxPool3 { x: Var, argmax: Vec<usize> },
    AvgPool3 { x: Var, stride: usize },
    Subsample { x: Var, stride: usize },
    ConcatChannels(Vec<Var>),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Dropout { x: Var, mask: Vec<f64> },
    SoftmaxLast(Var),
    Weighted { x: Var, w: Var, idx: usize },
    BandPool { x: Var, parts: usize },
    BandBroadcast { x: Var },
    Bmm(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor, mean: bool },
    PairwiseDist { x: Var, eps: f64 },
    Gather { x: Var, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// Adds a constant tensor. `c` may match the trailing dimensions of `a`
    /// only, in which case it is broadcast over the leading ones.
    pub fn add_const(&mut self, a: Var, c: Tensor) -> Var {
        let va = self.value(a);
        let inner = c.len();
        assert!(
            va.shape().ends_with(c.shape()),
            "add_const: {:?} does not broadcast over {:?}",
            c.shape(),
            va.shape()
        );
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + c.data()[i % inner])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddConst(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else if v.is_nan() { v } else { 0.0 });
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum() / va.len() as f64);
        let ng = self.ng(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = kernels::permute(self.value(a), perm);
        let ng = self.ng(&[a]);
        self.push(out, Op::Permute(a, perm.to_vec()), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), &spec);
        let ng = self.ng(&[x, w]);
        self.push(out, Op::Conv2d { x, w, spec }, ng)
    }

    /// Training-mode batch normalisation over (N, H, W) per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let vx = self.value(x);
        let [n, c, h, w] = dims4(vx);
        let m = n * h * w;
        let xd = vx.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                mean[ch] += xd[base..base + h * w].iter().sum::<f64>();
            }
        }
        for v in &mut mean {
            *v /= m as f64;
        }
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                var[ch] += xd[base..base + h * w].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let var_unbiased: Vec<f64> = var
            .iter()
            .map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 })
            .collect();
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / m as f64 + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in base..base + h * w {
                    let xh = (xd[i] - mean[ch]) * invstd[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(shape.clone(), out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat),
                invstd,
            },
            ng,
        );
        (v, BatchStats { mean, var_unbiased })
    }

    /// Evaluation-mode batch normalisation with fixed statistics.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let vx = self.value(x);
        let [n, c, h, w] = dims4(vx);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xd = vx.data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in base..base + h * w {
                    out[i] = g[ch] * (xd[i] - mean[ch]) * invstd[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd,
            },
            ng,
        )
    }

    pub fn max_pool3(&mut self, x: Var, stride: usize) -> Var {
        let (out, argmax) = kernels::max_pool3(self.value(x), stride);
        let ng = self.ng(&[x]);
        self.push(out, Op::MaxPool3 { x, argmax }, ng)
    }

    pub fn avg_pool3(&mut self, x: Var, stride: usize) -> Var {
        let out = kernels::avg_pool3(self.value(x), stride);
        let ng = self.ng(&[x]);
        self.push(out, Op::AvgPool3 { x, stride }, ng)
    }

    /// Keeps every `stride`-th row and column.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Var {
        if stride == 1 {
            return x;
        }
        let out = kernels::subsample(self.value(x), stride);
        let ng = self.ng(&[x]);
        self.push(out, Op::Subsample { x, stride }, ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = dims4(self.value(parts[0]));
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = dims4(self.value(p));
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shape mismatch");
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let vp = self.value(p);
                let pc = vp.dim(1);
                out.extend_from_slice(&vp.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::new(vec![n, total_c, h, w], out),
            Op::ConcatChannels(parts.to_vec()),
            ng,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let [n, c, h, w] = dims4(vx);
        let plane = h * w;
        let out: Vec<f64> = vx
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Multiplies by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let vx = self.value(x);
        assert_eq!(mask.len(), vx.len());
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let last = *vx.shape().last().expect("softmax of a scalar");
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(last) {
            out.extend(softmax(row));
        }
        let out = Tensor::new(vx.shape().to_vec(), out);
        let ng = self.ng(&[x]);
        self.push(out, Op::SoftmaxLast(x), ng)
    }

    /// `w[idx] * x` for a vector-valued `w`.
    pub fn weighted(&mut self, x: Var, w: Var, idx: usize) -> Var {
        let factor = self.value(w).data()[idx];
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(&[x, w]);
        self.push(out, Op::Weighted { x, w, idx }, ng)
    }

    /// Splits `[N,C,H,W]` into `parts` horizontal bands and averages each band
    /// spatially, giving `[N,parts,C]`.
    pub fn band_pool(&mut self, x: Var, parts: usize) -> Var {
        let vx = self.value(x);
        let [n, c, h, w] = dims4(vx);
        assert_eq!(h % parts, 0, "height {h} not divisible by {parts} parts");
        let band = h / parts;
        let xd = vx.data();
        let mut out = vec![0.0; n * parts * c];
        let denom = (band * w) as f64;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for m in 0..parts {
                    let s: f64 = xd[base + m * band * w..base + (m + 1) * band * w].iter().sum();
                    out[(b * parts + m) * c + ch] = s / denom;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, parts, c], out), Op::BandPool { x, parts }, ng)
    }

    /// Inverse layout of [`Tape::band_pool`]: `[N,M,D]` is repeated over each
    /// band's extent, giving `[N,D,height,width]`.
    pub fn band_broadcast(&mut self, x: Var, height: usize, width: usize) -> Var {
        let vx = self.value(x);
        let (n, parts, d) = (vx.dim(0), vx.dim(1), vx.dim(2));
        assert_eq!(height % parts, 0);
        let band = height / parts;
        let xd = vx.data();
        let mut out = vec![0.0; n * d * height * width];
        for b in 0..n {
            for ch in 0..d {
                let base = (b * d + ch) * height * width;
                for m in 0..parts {
                    let v = xd[(b * parts + m) * d + ch];
                    out[base + m * band * width..base + (m + 1) * band * width].fill(v);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![n, d, height, width], out),
            Op::BandBroadcast { x },
            ng,
        )
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let out = kernels::bmm(self.value(a), self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Bmm(a, b), ng)
    }

    /// Softmax cross-entropy of `[N,C]` logits against integer labels, summed
    /// or averaged over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mean: bool) -> Var {
        let vl = self.value(logits);
        let (n, c) = (vl.dim(0), vl.dim(1));
        assert_eq!(labels.len(), n);
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &label) in vl.data().chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        if mean {
            loss /= n as f64;
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::new(vec![n, c], probs),
                mean,
            },
            ng,
        )
    }

    /// Euclidean distance matrix of the rows of `x`, with the squared distance
    /// clamped below at `eps` before the square root.
    pub fn pairwise_dist(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (n, d) = (vx.dim(0), vx.dim(1));
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: f64 = vx.row(i).iter().zip(vx.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                out[i * n + j] = sq.max(eps).sqrt();
            }
        }
        let _ = d;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![n, n], out), Op::PairwiseDist { x, eps }, ng)
    }

    /// Flat-index gather producing a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Var {
        let xd = self.value(x).data();
        let out = Tensor::from_vec(indices.iter().map(|&i| xd[i]).collect());
        let ng = self.ng(&[x]);
        self.push(
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass seeded with d(root)/d(root) = 1. `root` must be a scalar.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) | Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(&shape, g.item() / n));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                self.accumulate(grads, *a, kernels::permute(g, &inv));
            }
            Op::Conv2d { x, w, spec } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    spec,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => {
                let [n, c, h, w] = dims4(g);
                let plane = h * w;
                let m = (n * plane) as f64;
                let gd = g.data();
                let xh = xhat.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xh[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let k = gam[ch] * invstd[ch] / m;
                            for i in base..base + plane {
                                dx[i] = k * (m * gd[i] - sum_g[ch] - xh[i] * sum_gx[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(sum_gx));
                self.accumulate(grads, *beta, Tensor::from_vec(sum_g));
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let [n, c, h, w] = dims4(g);
                let plane = h * w;
                let gd = g.data();
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dx[i] = gd[i] * gam[ch] * invstd[ch];
                            dgamma[ch] += gd[i] * (xd[i] - mean[ch]) * invstd[ch];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx));
                self.accumulate(grads, *gamma, Tensor::from_vec(dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(dbeta));
            }
            Op::MaxPool3 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (gv, &src) in g.data().iter().zip(argmax) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool3 { x, stride } => {
                let dx = kernels::avg_pool3_backward(self.shape(*x), g, *stride);
                self.accumulate(grads, *x, dx);
            }
            Op::Subsample { x, stride } => {
                let dx = kernels::subsample_backward(self.shape(*x), g, *stride);
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatChannels(parts) => {
                let [n, total_c, h, w] = dims4(g);
                let plane = h * w;
                let gd = g.data();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dim(1);
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            d.extend_from_slice(&gd[start..start + pc * plane]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![n, pc, h, w], d));
                    }
                    offset += pc;
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x).to_vec();
                let plane = shape[2] * shape[3];
                let mut d = Vec::with_capacity(numel(&shape));
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                self.accumulate(grads, *x, Tensor::new(shape, d));
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, din) = (vx.dim(0), vx.dim(1));
                let dout = vw.dim(0);
                let gd = g.data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let gv = gd[i * dout + o];
                            let wrow = &vw.data()[o * din..(o + 1) * din];
                            for (dxv, wv) in dx[i * din..(i + 1) * din].iter_mut().zip(wrow) {
                                *dxv += gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    for i in 0..n {
                        let xrow = vx.row(i);
                        for o in 0..dout {
                            let gv = gd[i * dout + o];
                            for (dwv, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xrow) {
                                *dwv += gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(db));
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::SoftmaxLast(x) => {
                let last = *g.shape().last().unwrap();
                let mut d = Vec::with_capacity(g.len());
                for (grow, prow) in g.data().chunks(last).zip(node.value.data().chunks(last)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    d.extend(grow.iter().zip(prow).map(|(gv, p)| p * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Weighted { x, w, idx } => {
                let vw = self.value(*w);
                let factor = vw.data()[*idx];
                self.accumulate(grads, *x, g.map(|v| v * factor));
                if self.wants(*w) {
                    let dot: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    let mut dw = Tensor::zeros(vw.shape());
                    dw.data_mut()[*idx] = dot;
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::BandPool { x, parts } => {
                let shape = self.shape(*x).to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let band = h / parts;
                let denom = (band * w) as f64;
                let gd = g.data();
                let mut dx = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for m in 0..*parts {
                            let v = gd[(b * parts + m) * c + ch] / denom;
                            dx[base + m * band * w..base + (m + 1) * band * w].fill(v);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::BandBroadcast { x } => {
                let shape = self.shape(*x).to_vec();
                let (n, parts, d) = (shape[0], shape[1], shape[2]);
                let [_, _, h, w] = dims4(g);
                let band = h / parts;
                let gd = g.data();
                let mut dx = vec![0.0; n * parts * d];
                for b in 0..n {
                    for ch in 0..d {
                        let base = (b * d + ch) * h * w;
                        for m in 0..parts {
                            dx[(b * parts + m) * d + ch] =
                                gd[base + m * band * w..base + (m + 1) * band * w].iter().sum();
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let bt = kernels::permute(vb, &[0, 2, 1]);
                    self.accumulate(grads, *a, kernels::bmm(g, &bt));
                }
                if self.wants(*b) {
                    let at = kernels::permute(va, &[0, 2, 1]);
                    self.accumulate(grads, *b, kernels::bmm(&at, g));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                mean,
            } => {
                let (n, c) = (probs.dim(0), probs.dim(1));
                let scale = g.item() / if *mean { n as f64 } else { 1.0 };
                let mut d = probs.data().to_vec();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * c + label] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, c], d));
            }
            Op::PairwiseDist { x, eps } => {
                let vx = self.value(*x);
                let (n, dim) = (vx.dim(0), vx.dim(1));
                let dist = node.value.data();
                let gd = g.data();
                let mut dx = vec![0.0; n * dim];
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist[i * n + j];
                        let gv = gd[i * n + j];
                        if gv == 0.0 || dij * dij <= *eps {
                            continue;
                        }
                        let (ri, rj) = (vx.row(i), vx.row(j));
                        for k in 0..dim {
                            let t = gv * (ri[k] - rj[k]) / dij;
                            dx[i * dim + k] += t;
                            dx[j * dim + k] -= t;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, dim], dx));
            }
            Op::Gather { x, indices } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (gv, &i) in g.data().iter().zip(indices) {
                    d[i] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

use crate::tensor::numel;

/// Numerically stable softmax of a slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
