//! Retrieval losses and the identity-balanced batch sampler.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon under the square root of pairwise distances.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// Per-anchor triplet term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletForm {
    /// `max(0, margin + d_p - d_n)`
    #[default]
    Hinge,
    /// `max(margin, d_p - d_n)`
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cross-entropy term; the triplet term gets `1 - lambda`.
    pub lambda: f64,
    pub margin: f64,
    pub reduction: Reduction,
    pub triplet: TripletForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            margin: 0.3,
            reduction: Reduction::Mean,
            triplet: TripletForm::Hinge,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::invalid(format!("margin {} must be nonnegative", self.margin)));
        }
        Ok(())
    }
}

/// Softmax cross-entropy of `[N, C]` logits.
pub fn softmax_ce(tape: &mut Tape, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::invalid(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::invalid(format!("label {bad} outside [0, {})", shape[1])));
    }
    Ok(tape.cross_entropy(logits, labels, reduction == Reduction::Mean))
}

/// Hardest positive and hardest negative of every anchor under distance
/// matrix `dist` (`[N, N]`, row-major). Ties go to the lower index.
pub fn mine_hard(dist: &Tensor, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = labels.len();
    assert_eq!(dist.shape(), [n, n]);
    let d = dist.data();
    (0..n)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                let v = d[i * n + j];
                if labels[j] == labels[i] {
                    if j != i && pos.is_none_or(|p| v > d[i * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| v < d[i * n + q]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(q)) => Ok((p, q)),
                (None, _) => Err(Error::invalid(format!(
                    "identity {} has a single sample in the batch; hardest positive undefined",
                    labels[i]
                ))),
                (_, None) => Err(Error::invalid("batch holds a single identity; hardest negative undefined")),
            }
        })
        .collect()
}

/// Batch-hard triplet loss on `[N, d]` features with Euclidean distances.
pub fn batch_hard_triplet(
    tape: &mut Tape,
    f: Var,
    labels: &[usize],
    margin: f64,
    form: TripletForm,
    reduction: Reduction,
) -> Result<Var> {
    let shape = tape.shape(f);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::invalid(format!(
            "features {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let n = labels.len();
    let dist = tape.pairwise_dist(f, DIST_EPS);
    let pairs = mine_hard(tape.value(dist), labels)?;
    let (pi, ni): (Vec<usize>, Vec<usize>) = pairs.iter().enumerate().map(|(i, &(p, q))| (i * n + p, i * n + q)).unzip();
    let dp = tape.gather(dist, &pi);
    let dn = tape.gather(dist, &ni);
    let gap = tape.sub(dp, dn);
    let terms = match form {
        TripletForm::Hinge => {
            let t = tape.add_scalar(gap, margin);
            tape.relu(t)
        }
        TripletForm::Literal => {
            let t = tape.add_scalar(gap, -margin);
            let t = tape.relu(t);
            tape.add_scalar(t, margin)
        }
    };
    Ok(match reduction {
        Reduction::Sum => tape.sum(terms),
        Reduction::Mean => tape.mean(terms),
    })
}

/// `lambda * ce + (1 - lambda) * tri`.
pub fn mixture_loss(tape: &mut Tape, ce: Var, tri: Var, lambda: f64) -> Var {
    let a = tape.scale(ce, lambda);
    let b = tape.scale(tri, 1.0 - lambda);
    tape.add(a, b)
}

/// Scalar value of [`mixture_loss`].
pub fn mixture_value(ce: f64, tri: f64, lambda: f64) -> f64 {
    lambda * ce + (1.0 - lambda) * tri
}

/// Which part of the retrieval objective drives an update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// The `lambda` mixture of both terms.
    #[default]
    Mixture,
    CrossEntropy,
    Triplet,
}

/// Components of one evaluation of the retrieval objective.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalLoss {
    pub ce: Var,
    pub tri: Var,
    pub total: Var,
}

impl RetrievalLoss {
    pub fn select(&self, kind: LossKind) -> Var {
        match kind {
            LossKind::Mixture => self.total,
            LossKind::CrossEntropy => self.ce,
            LossKind::Triplet => self.tri,
        }
    }
}

/// Cross-entropy on the logits `h`, batch-hard triplet on the features `f`
/// and their mixture.
pub fn retrieval_loss(tape: &mut Tape, h: Var, f: Var, labels: &[usize], w: &LossWeights) -> Result<RetrievalLoss> {
    let ce = softmax_ce(tape, h, labels, w.reduction)?;
    let tri = batch_hard_triplet(tape, f, labels, w.margin, w.triplet, w.reduction)?;
    let total = mixture_loss(tape, ce, tri, w.lambda);
    Ok(RetrievalLoss { ce, tri, total })
}

/// Value of [`softmax_ce`] on a plain tensor.
pub fn softmax_ce_value(logits: &Tensor, labels: &[usize], reduction: Reduction) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = softmax_ce(&mut tape, l, labels, reduction)?;
    Ok(tape.value(v).item())
}

/// Value of [`batch_hard_triplet`] on a plain tensor.
pub fn batch_hard_triplet_value(
    f: &Tensor,
    labels: &[usize],
    margin: f64,
    form: TripletForm,
    reduction: Reduction,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let l = batch_hard_triplet(&mut tape, v, labels, margin, form, reduction)?;
    Ok(tape.value(l).item())
}

/// Sample positions grouped by identity label.
#[derive(Clone, Debug)]
pub struct IdentityIndex {
    /// Distinct labels in increasing order.
    pub ids: Vec<usize>,
    /// `members[k]` holds the positions labelled `ids[k]`.
    pub members: Vec<Vec<usize>>,
}

impl IdentityIndex {
    pub fn new(labels: &[usize]) -> Self {
        let mut ids: Vec<usize> = labels.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut members = vec![Vec::new(); ids.len()];
        for (pos, l) in labels.iter().enumerate() {
            let k = ids.binary_search(l).expect("label was collected");
            members[k].push(pos);
        }
        IdentityIndex { ids, members }
    }

    pub fn num_ids(&self) -> usize {
        self.ids.len()
    }
}

/// Positions and labels of one identity-balanced batch, identity-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkDraw {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Draws `p` distinct identities and `k` samples of each. Samples are taken
/// without replacement when an identity has at least `k`; otherwise every
/// sample is used once and the remaining slots are drawn with replacement.
pub fn pk_sample<R: Rng + ?Sized>(index: &IdentityIndex, p: usize, k: usize, rng: &mut R) -> Result<PkDraw> {
    if p == 0 || k == 0 {
        return Err(Error::invalid("P and K must be positive"));
    }
    if index.num_ids() < p {
        return Err(Error::invalid(format!(
            "cannot draw {p} identities from {}",
            index.num_ids()
        )));
    }
    let mut draw = PkDraw {
        indices: Vec::with_capacity(p * k),
        labels: Vec::with_capacity(p * k),
    };
    for id_pos in sample(rng, index.num_ids(), p) {
        let members = &index.members[id_pos];
        if members.len() >= k {
            draw.indices.extend(sample(rng, members.len(), k).into_iter().map(|i| members[i]));
        } else {
            draw.indices.extend(members);
            for _ in members.len()..k {
                draw.indices.push(members[rng.random_range(0..members.len())]);
            }
        }
        draw.labels.extend(std::iter::repeat_n(index.ids[id_pos], k));
    }
    Ok(draw)
}

/// Images and labels of one training batch.
#[derive(Clone, Debug)]
pub struct RetrievalBatch {
    /// `[N, 3, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the images in their source set.
    pub indices: Vec<usize>,
}
