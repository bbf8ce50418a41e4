//! Alternating first-order optimization of operation weights (ω) on one
//! half of the training data and architecture logits (α) on the other.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspace::{derive_genotype, AlphaParams, Genotype, MacroConfig, SearchSpace};
use crate::error::{Error, Result};
use crate::harness::{sub_seed, ImageSet};
use crate::nn::{Ctx, GradTarget};
use crate::objectives::{pk_sample, retrieval_loss, IdentityIndex, LossKind, LossWeights, RetrievalBatch};
use crate::optim::{cosine_lr, step_lr, Adam, Sgd};
use crate::supernet::{build_supernet, save_checkpoint, Checkpoint, Model};

/// Momentum SGD with cosine decay for ω.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OmegaOptConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OmegaOptConfig {
    fn default() -> Self {
        OmegaOptConfig {
            lr: 0.1,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with step decay for α.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaOptConfig {
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AlphaOptConfig {
    fn default() -> Self {
        AlphaOptConfig {
            lr: 0.02,
            milestones: vec![60, 150],
            gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    /// Defaults to `ceil(|D_train| / (P * K))`.
    pub steps_per_epoch: Option<usize>,
    pub omega: OmegaOptConfig,
    pub alpha: AlphaOptConfig,
    pub loss: LossWeights,
    /// Objective of the α update.
    pub alpha_loss: LossKind,
    /// Share of each identity's images used to train ω.
    pub split_fraction: f64,
    pub space: SearchSpace,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 200,
            p: 4,
            k: 4,
            steps_per_epoch: None,
            omega: OmegaOptConfig::default(),
            alpha: AlphaOptConfig::default(),
            loss: LossWeights::default(),
            alpha_loss: LossKind::Mixture,
            split_fraction: 0.5,
            space: SearchSpace::Reid,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid(format!("split fraction {} outside (0, 1)", self.split_fraction)));
        }
        for (name, lr) in [
            ("omega.lr", self.omega.lr),
            ("omega.lr_min", self.omega.lr_min),
            ("alpha.lr", self.alpha.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid("triplet mining needs P >= 2 and K >= 2"));
        }
        if self.alpha.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("alpha.milestones must be strictly increasing"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be positive"));
        }
        self.loss.validate()
    }

    pub fn omega_lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch as f64, self.epochs as f64, self.omega.lr, self.omega.lr_min)
    }

    pub fn alpha_lr(&self, epoch: usize) -> f64 {
        step_lr(epoch, self.alpha.lr, &self.alpha.milestones, self.alpha.gamma)
    }
}

/// Sample positions on each side of the search split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Divides every identity's samples between the two sides, `fraction` of
/// them (rounded, at least one, at most all but one) going to `train`.
/// Identities with a single sample go wholly to `train`. A warning is
/// recorded for each identity left with fewer than two samples on a side.
pub fn split_dataset(ids: &[usize], fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let index = IdentityIndex::new(ids);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DataSplit {
        train: Vec::new(),
        val: Vec::new(),
        warnings: Vec::new(),
    };
    for (id, members) in index.ids.iter().zip(&index.members) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let n = members.len();
        if n < 2 {
            split.warnings.push(format!("identity {id} has a single image; kept for training only"));
            split.train.extend(members);
            continue;
        }
        let n_train = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        if n_train < 2 || n - n_train < 2 {
            split.warnings.push(format!(
                "identity {id}: {n_train} training and {} validation images",
                n - n_train
            ));
        }
        split.train.extend(&members[..n_train]);
        split.val.extend(&members[n_train..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    for w in &split.warnings {
        log::warn!("{w}");
    }
    Ok(split)
}

/// One row of `search_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_train: f64,
    pub loss_val: f64,
    pub lr_w: f64,
    pub lr_a: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchState {
    pub epoch: usize,
    /// Steps taken so far, over all epochs.
    pub step: usize,
    /// α after each completed epoch.
    pub alpha_history: Vec<AlphaParams>,
    pub genotype_history: Vec<Genotype>,
    /// Mean losses of each completed epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub log: Vec<SearchLogRow>,
}

/// The two optimizers of the search.
#[derive(Clone, Debug)]
pub struct SearchOptimizers {
    pub omega: Sgd,
    pub alpha: Adam,
}

impl SearchOptimizers {
    pub fn new(cfg: &SearchConfig) -> Self {
        SearchOptimizers {
            omega: Sgd::new(cfg.omega.momentum, cfg.omega.weight_decay),
            alpha: Adam::new(cfg.alpha.beta1, cfg.alpha.beta2, cfg.alpha.weight_decay),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

fn objective(
    model: &Model,
    ctx: &mut Ctx,
    batch: &RetrievalBatch,
    w: &LossWeights,
    kind: LossKind,
) -> Result<crate::autograd::Var> {
    let x = ctx.input(batch.images.clone());
    let out = model.net.forward(ctx, x)?;
    let parts = retrieval_loss(&mut ctx.tape, out.h, out.f, &batch.labels, w)?;
    Ok(parts.select(kind))
}

fn diverged(state: &SearchState, what: &str, value: f64) -> Error {
    Error::Diverged {
        epoch: state.epoch,
        step: state.step,
        msg: format!("{what} loss is {value}"),
    }
}

fn step_seed(cfg: &SearchConfig, state: &SearchState) -> u64 {
    sub_seed(cfg.seed, "dropout") ^ (state.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// ω update from a training batch with α fixed. Folds the batch statistics
/// into the running buffers. Returns the loss before the update.
pub fn omega_substep(
    state: &SearchState,
    model: &mut Model,
    opt: &mut Sgd,
    batch: &RetrievalBatch,
    cfg: &SearchConfig,
) -> Result<f64> {
    let mut ctx = Ctx::new(&model.store, true, GradTarget::Weights, step_seed(cfg, state));
    let loss = objective(model, &mut ctx, batch, &cfg.loss, LossKind::Mixture)?;
    let value = ctx.value(loss).item();
    if !value.is_finite() {
        return Err(diverged(state, "training", value));
    }
    let grads = ctx.gradients(loss);
    let bn = ctx.into_bn_updates();
    opt.step(&mut model.store, &grads, cfg.omega_lr(state.epoch));
    bn.apply(&mut model.store);
    Ok(value)
}

/// α update from a validation batch with ω and the running buffers fixed
/// (first-order: no unrolled ω step). Returns the loss before the update.
pub fn alpha_substep(
    state: &SearchState,
    model: &mut Model,
    opt: &mut Adam,
    batch: &RetrievalBatch,
    cfg: &SearchConfig,
) -> Result<f64> {
    let mut ctx = Ctx::new(&model.store, true, GradTarget::Arch, step_seed(cfg, state) ^ 1);
    let loss = objective(model, &mut ctx, batch, &cfg.loss, cfg.alpha_loss)?;
    let value = ctx.value(loss).item();
    if !value.is_finite() {
        return Err(diverged(state, "validation", value));
    }
    let grads = ctx.gradients(loss);
    opt.step(&mut model.store, &grads, cfg.alpha_lr(state.epoch));
    Ok(value)
}

/// One iteration of the alternating loop: [`omega_substep`] on `train`,
/// then [`alpha_substep`] on `val`.
pub fn search_step(
    state: &mut SearchState,
    model: &mut Model,
    opt: &mut SearchOptimizers,
    train: &RetrievalBatch,
    val: &RetrievalBatch,
    cfg: &SearchConfig,
) -> Result<StepLosses> {
    let loss_train = omega_substep(state, model, &mut opt.omega, train, cfg)?;
    let loss_val = alpha_substep(state, model, &mut opt.alpha, val, cfg)?;
    state.log.push(SearchLogRow {
        epoch: state.epoch,
        step: state.step,
        loss_train,
        loss_val,
        lr_w: cfg.omega_lr(state.epoch),
        lr_a: cfg.alpha_lr(state.epoch),
    });
    state.step += 1;
    Ok(StepLosses {
        train: loss_train,
        val: loss_val,
    })
}

/// Result of a complete search.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub state: SearchState,
    pub model: Model,
    pub split: DataSplit,
}

/// Draws a PK batch from the positions `pool` of `data`.
pub fn draw_batch(
    data: &ImageSet,
    labels: &[usize],
    pool: &[usize],
    index: &IdentityIndex,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RetrievalBatch> {
    let draw = pk_sample(index, p, k, rng)?;
    let indices: Vec<usize> = draw.indices.iter().map(|&i| pool[i]).collect();
    Ok(RetrievalBatch {
        images: data.batch(&indices),
        labels: indices.iter().map(|&i| labels[i]).collect(),
        indices,
    })
}

/// Runs the full search on `data` and derives the genotype. The classifier
/// width follows the number of identities in `data`. When `out` is given,
/// writes `search_log.csv`, `alpha_epoch{N}.ckpt` after every epoch and the
/// final `genotype.json`.
pub fn run_search(cfg: &SearchConfig, m: &MacroConfig, data: &ImageSet, out: Option<&Path>) -> Result<SearchOutcome> {
    cfg.validate()?;
    if data.hw != m.input_hw {
        return Err(Error::invalid(format!(
            "images are {:?} but the network expects {:?}",
            data.hw, m.input_hw
        )));
    }
    let labels = data.class_labels();
    let m = MacroConfig {
        num_ids: data.identities().len(),
        ..m.clone()
    };
    let split = split_dataset(&labels, cfg.split_fraction, sub_seed(cfg.seed, "split"))?;
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let val_labels: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();
    let (train_index, val_index) = (IdentityIndex::new(&train_labels), IdentityIndex::new(&val_labels));
    for (name, idx) in [("training", &train_index), ("validation", &val_index)] {
        if idx.num_ids() < cfg.p {
            return Err(Error::invalid(format!(
                "{name} side has {} identities, fewer than P = {}",
                idx.num_ids(),
                cfg.p
            )));
        }
    }

    let mut model = build_supernet(&m, cfg.space, sub_seed(cfg.seed, "init"))?;
    let mut opt = SearchOptimizers::new(cfg);
    let mut state = SearchState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "sampler"));
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| split.train.len().div_ceil(cfg.p * cfg.k));

    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("search_log.csv");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(["epoch", "step", "loss_train", "loss_val", "lr_w", "lr_a"])
                .and_then(|_| w.flush().map_err(Into::into))
                .map_err(|e| Error::io(&path, e.into()))?;
            Some((w, path))
        }
        None => None,
    };

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let (mut sum_t, mut sum_v) = (0.0, 0.0);
        for _ in 0..steps {
            let bt = draw_batch(data, &labels, &split.train, &train_index, cfg.p, cfg.k, &mut rng)?;
            let bv = draw_batch(data, &labels, &split.val, &val_index, cfg.p, cfg.k, &mut rng)?;
            let l = search_step(&mut state, &mut model, &mut opt, &bt, &bv, cfg)?;
            sum_t += l.train;
            sum_v += l.val;
            if let Some((w, path)) = log.as_mut() {
                let row = state.log.last().expect("step logged");
                w.serialize(row)
                    .and_then(|_| w.flush().map_err(Into::into))
                    .map_err(|e| Error::io(path.as_path(), e.into()))?;
            }
        }
        state.train_loss.push(sum_t / steps as f64);
        state.val_loss.push(sum_v / steps as f64);
        let alpha = model.net.alpha_params(&model.store).expect("supernet");
        let genotype = derive_genotype(&alpha)?;
        log::info!(
            "search epoch {epoch}: train {:.4} val {:.4} genotype {}",
            state.train_loss[epoch],
            state.val_loss[epoch],
            genotype.render().replace('\n', " ")
        );
        state.alpha_history.push(alpha);
        state.genotype_history.push(genotype);
        if let Some(dir) = out {
            let mut ckpt = Checkpoint::from_model(&model, epoch + 1);
            ckpt.optim.insert("omega".into(), opt.omega.state());
            ckpt.optim.insert("alpha".into(), opt.alpha.state());
            ckpt.meta = serde_json::json!({ "seed": cfg.seed, "step": state.step });
            save_checkpoint(&dir.join(format!("alpha_epoch{epoch}.ckpt")), &ckpt)?;
        }
    }

    let alpha = model.net.alpha_params(&model.store).expect("supernet");
    let genotype = derive_genotype(&alpha)?;
    if let Some(dir) = out {
        let path = dir.join("genotype.json");
        std::fs::write(&path, genotype.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(SearchOutcome {
        genotype,
        state,
        model,
        split,
    })
}
