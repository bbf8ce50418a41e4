//! Training a discrete network from scratch with the retrieval objective.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspace::{Genotype, MacroConfig};
use crate::error::{Error, Result};
use crate::harness::{sub_seed, ImageSet};
use crate::nn::{Ctx, GradTarget};
use crate::objectives::{retrieval_loss, IdentityIndex, LossKind, LossWeights, RetrievalBatch};
use crate::optim::{step_lr, Adam};
use crate::retrieval::{evaluate, extract_features, EvalOptions, EvalResult, LabeledFeatures};
use crate::searcher::draw_batch;
use crate::supernet::{build_final_network, save_checkpoint, Checkpoint, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    /// Defaults to `ceil(|train| / (P * K))`.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub objective: LossKind,
    /// Random horizontal flips.
    pub flip: bool,
    /// Zero padding before the random crop back to full size; 0 disables.
    pub crop_pad: usize,
    /// Share of training identities held out for model selection.
    pub val_id_fraction: f64,
    pub min_val_ids: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 240,
            p: 8,
            k: 4,
            steps_per_epoch: None,
            lr: 0.0035,
            milestones: vec![80, 150],
            gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            loss: LossWeights::default(),
            objective: LossKind::Mixture,
            flip: true,
            crop_pad: 10,
            val_id_fraction: 0.1,
            min_val_ids: 2,
            eval_batch: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("milestones must be strictly increasing"));
        }
        if self.epochs > 0 && self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::invalid(format!(
                "milestones {:?} must lie below epochs = {}",
                self.milestones, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid("triplet mining needs P >= 2 and K >= 2"));
        }
        if !(0.0..1.0).contains(&self.val_id_fraction) {
            return Err(Error::invalid("val_id_fraction outside [0, 1)"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be positive"));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(epoch, self.lr, &self.milestones, self.gamma)
    }
}

/// Training identities and the held-out identities used for model selection.
#[derive(Clone, Debug)]
pub struct TrainSplit {
    pub train: ImageSet,
    /// Query and gallery drawn from the held-out identities.
    pub val: Option<(ImageSet, ImageSet)>,
}

/// Holds out `max(min_val_ids, round(fraction * n))` identities when at least
/// two identities remain for training; otherwise trains on everything. The
/// first image of each held-out identity is its query, the rest gallery.
pub fn split_for_training(data: &ImageSet, cfg: &TrainConfig) -> TrainSplit {
    let mut ids = data.identities();
    let n = ids.len();
    let want = if cfg.val_id_fraction > 0.0 {
        ((cfg.val_id_fraction * n as f64).round() as usize).max(cfg.min_val_ids)
    } else {
        0
    };
    if want == 0 || n < want + cfg.p.max(2) {
        if want > 0 {
            log::warn!("{n} identities are too few to hold out {want}; training without validation");
        }
        return TrainSplit {
            train: data.clone(),
            val: None,
        };
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "val-split")));
    let held = &ids[..want];
    let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());
    for (i, id) in data.ids.iter().enumerate() {
        if !held.contains(id) {
            train.push(i);
        } else if query.iter().any(|&q| data.ids[q] == *id) {
            gallery.push(i);
        } else {
            query.push(i);
        }
    }
    TrainSplit {
        train: data.subset(&train),
        val: Some((data.subset(&query), data.subset(&gallery))),
    }
}

/// The network `train` starts from for this data and configuration.
pub fn initial_model(g: &Genotype, m: &MacroConfig, data: &ImageSet, cfg: &TrainConfig) -> Result<Model> {
    let split = split_for_training(data, cfg);
    let m = MacroConfig {
        num_ids: split.train.identities().len(),
        ..m.clone()
    };
    build_final_network(g, &m, sub_seed(cfg.seed, "init"))
}

/// Random horizontal flip and pad-then-crop of every image in `[N, 3, H, W]`.
pub fn augment(images: &Tensor, flip: bool, pad: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    let mut out = Tensor::zeros(images.shape());
    let src = images.data();
    for b in 0..n {
        let mirrored = flip && rng.random_bool(0.5);
        let (dy, dx) = if pad > 0 {
            (rng.random_range(0..=2 * pad) as isize - pad as isize, rng.random_range(0..=2 * pad) as isize - pad as isize)
        } else {
            (0, 0)
        };
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let sx = if mirrored { w - 1 - sx as usize } else { sx as usize };
                    out.data_mut()[plane + y * w + x] = src[plane + sy as usize * w + sx];
                }
            }
        }
    }
    out
}

/// Retrieval metrics of `model` with `query` against `gallery`.
pub fn evaluate_sets(model: &Model, query: &ImageSet, gallery: &ImageSet, opts: &EvalOptions, batch: usize) -> Result<EvalResult> {
    let q = LabeledFeatures::new(extract_features(model, &query.images, batch)?, query.ids.clone(), query.cams.clone())?;
    let g = LabeledFeatures::new(
        extract_features(model, &gallery.images, batch)?,
        gallery.ids.clone(),
        gallery.cams.clone(),
    )?;
    evaluate(&q, &g, opts)
}

/// One row of `train_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub triplet: f64,
    pub val_map: Option<f64>,
    pub val_rank1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Network after the last epoch.
    pub model: Model,
    /// Network with the best validation mAP (the last one without validation).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub log: Vec<TrainLogRow>,
    /// Objective value of every step.
    pub step_losses: Vec<f64>,
}

/// Losses of one step, before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStep {
    pub loss: f64,
    pub ce: f64,
    pub triplet: f64,
}

/// One Adam step on `batch`.
pub fn train_step(model: &mut Model, opt: &mut Adam, batch: &RetrievalBatch, cfg: &TrainConfig, lr: f64, seed: u64) -> Result<TrainStep> {
    let mut ctx = Ctx::new(&model.store, true, GradTarget::Weights, seed);
    let x = ctx.input(batch.images.clone());
    let out = model.net.forward(&mut ctx, x)?;
    let parts = retrieval_loss(&mut ctx.tape, out.h, out.f, &batch.labels, &cfg.loss)?;
    let loss = parts.select(cfg.objective);
    let step = TrainStep {
        loss: ctx.value(loss).item(),
        ce: ctx.value(parts.ce).item(),
        triplet: ctx.value(parts.tri).item(),
    };
    if !step.loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            msg: format!("loss is {} (ce {}, triplet {})", step.loss, step.ce, step.triplet),
        });
    }
    let grads = ctx.gradients(loss);
    let bn = ctx.into_bn_updates();
    opt.step(&mut model.store, &grads, lr);
    bn.apply(&mut model.store);
    Ok(step)
}

/// Trains the network of genotype `g` on `data`. When `out` is given, writes
/// `train_log.csv`, `best.ckpt` and `last.ckpt`.
pub fn train(g: &Genotype, m: &MacroConfig, data: &ImageSet, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.hw != m.input_hw {
        return Err(Error::invalid(format!(
            "images are {:?} but the network expects {:?}",
            data.hw, m.input_hw
        )));
    }
    let split = split_for_training(data, cfg);
    let mut model = initial_model(g, m, data, cfg)?;
    let labels = split.train.class_labels();
    let index = IdentityIndex::new(&labels);
    if index.num_ids() < cfg.p {
        return Err(Error::invalid(format!(
            "{} training identities, fewer than P = {}",
            index.num_ids(),
            cfg.p
        )));
    }
    let pool: Vec<usize> = (0..split.train.len()).collect();
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| split.train.len().div_ceil(cfg.p * cfg.k));
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut sampler = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "sampler"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "augment"));
    let dropout_seed = sub_seed(cfg.seed, "dropout");
    let eval_opts = EvalOptions {
        camera_filter: data.cams.iter().any(Option::is_some),
    };

    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.write_record(["epoch", "lr", "loss", "ce", "triplet", "val_map", "val_rank1"])
                .and_then(|_| w.flush().map_err(Into::into))
                .map_err(|e| Error::io(&path, e.into()))?;
            Some((w, path))
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut loss, mut ce, mut tri) = (0.0, 0.0, 0.0);
        for s in 0..steps {
            let mut batch = draw_batch(&split.train, &labels, &pool, &index, cfg.p, cfg.k, &mut sampler)?;
            batch.images = augment(&batch.images, cfg.flip, cfg.crop_pad, &mut aug_rng);
            let global = (epoch * steps + s) as u64;
            let r = train_step(&mut model, &mut opt, &batch, cfg, lr, dropout_seed ^ global.wrapping_mul(0x9e37_79b9_7f4a_7c15))
                .map_err(|e| match e {
                    Error::Diverged { msg, .. } => Error::Diverged { epoch, step: s, msg },
                    other => other,
                })?;
            step_losses.push(r.loss);
            loss += r.loss;
            ce += r.ce;
            tri += r.triplet;
        }
        let metrics = match &split.val {
            Some((q, gal)) => match evaluate_sets(&model, q, gal, &eval_opts, cfg.eval_batch) {
                Ok(r) => Some((r.map, r.rank(1))),
                Err(e) => {
                    log::warn!("validation skipped: {e}");
                    None
                }
            },
            None => None,
        };
        let row = TrainLogRow {
            epoch,
            lr,
            loss: loss / steps as f64,
            ce: ce / steps as f64,
            triplet: tri / steps as f64,
            val_map: metrics.map(|m| m.0),
            val_rank1: metrics.map(|m| m.1),
        };
        log::info!("train epoch {epoch}: loss {:.4} val mAP {:?}", row.loss, row.val_map);
        if let Some((w, path)) = writer.as_mut() {
            w.serialize(&row)
                .and_then(|_| w.flush().map_err(Into::into))
                .map_err(|e| Error::io(path.as_path(), e.into()))?;
        }
        if let Some((map, _)) = metrics {
            if best.as_ref().is_none_or(|(b, _, _)| map > *b) {
                best = Some((map, epoch, model.clone()));
            }
        }
        log.push(row);
    }

    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model.clone()),
    };
    if let Some(dir) = out {
        let mut last = Checkpoint::from_model(&model, cfg.epochs);
        last.optim.insert("weights".into(), opt.state());
        last.meta = serde_json::json!({ "seed": cfg.seed });
        save_checkpoint(&dir.join("last.ckpt"), &last)?;
        let mut b = Checkpoint::from_model(&best_model, best_epoch.map_or(cfg.epochs, |e| e + 1));
        b.meta = serde_json::json!({ "seed": cfg.seed, "best_epoch": best_epoch });
        save_checkpoint(&dir.join("best.ckpt"), &b)?;
    }
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_epoch,
        log,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{BlockSpec, OpKind, SearchSpace};
    use crate::harness::{synthetic_image_set, SyntheticSpec};
    use crate::supernet::load_checkpoint;

    fn tiny_macro() -> MacroConfig {
        MacroConfig {
            channels: 4,
            layers: [1, 1, 1, 1],
            blocks: 2,
            input_hw: [32, 16],
            embed_dim: 16,
            dropout_f: 0.0,
            dropout_g: 0.0,
            ..Default::default()
        }
    }

    fn genotype() -> Genotype {
        let cell = vec![
            BlockSpec::new(0, 1, OpKind::SepConv3x3, OpKind::Identity),
            BlockSpec::new(2, 1, OpKind::PartAware, OpKind::MaxPool3x3),
        ];
        Genotype {
            space: SearchSpace::Reid,
            normal: cell.clone(),
            reduction: cell,
        }
    }

    fn data(num_ids: usize, imgs: usize) -> ImageSet {
        let spec = SyntheticSpec {
            num_ids,
            imgs_per_id: imgs,
            height: 64,
            width: 32,
            noise: 0.05,
            seed: 5,
        };
        synthetic_image_set(&spec, [32, 16]).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            p: 2,
            k: 4,
            steps_per_epoch: Some(2),
            milestones: vec![],
            flip: false,
            crop_pad: 0,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        let lr = |e| cfg.lr_at(e);
        assert!((lr(0) - 3.5e-3).abs() < 1e-12);
        assert!((lr(79) - 3.5e-3).abs() < 1e-12);
        assert!((lr(80) - 3.5e-4).abs() < 1e-12);
        assert!((lr(149) - 3.5e-4).abs() < 1e-12);
        assert!((lr(150) - 3.5e-5).abs() < 1e-12);
        assert!((lr(239) - 3.5e-5).abs() < 1e-12);
    }

    #[test]
    fn bad_configs() {
        let bad = [
            TrainConfig { milestones: vec![150, 80], ..Default::default() },
            TrainConfig { epochs: 100, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { p: 1, ..Default::default() },
            TrainConfig { steps_per_epoch: Some(0), ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        // milestones are irrelevant when nothing is trained
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn augment_identity_and_flip() {
        let d = data(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&d.images, false, 0, &mut rng), d.images);
        let flipped = augment(&d.images, true, 0, &mut rng);
        let [h, w] = d.hw;
        for b in 0..d.len() {
            let plane = |t: &Tensor, x: usize| t.data()[b * 3 * h * w + 5 * w + x];
            let same = (0..w).all(|x| plane(&flipped, x) == plane(&d.images, x));
            let mirrored = (0..w).all(|x| plane(&flipped, x) == plane(&d.images, w - 1 - x));
            assert!(same || mirrored);
        }
        // shifted crops keep the shape and only move or zero pixels
        let crop = augment(&d.images, false, 3, &mut rng);
        assert_eq!(crop.shape(), d.images.shape());
        assert!(crop.data().iter().all(|v| *v == 0.0 || d.images.data().contains(v)));
    }

    #[test]
    fn validation_identities_are_disjoint() {
        let d = data(12, 3);
        let cfg = TrainConfig { p: 4, ..quick(1) };
        let s = split_for_training(&d, &cfg);
        let (q, g) = s.val.expect("validation split");
        assert_eq!(q.identities().len(), 2);
        assert_eq!(q.len(), 2);
        assert_eq!(g.len(), 4);
        assert_eq!(s.train.len(), 30);
        assert!(q.identities().iter().all(|id| !s.train.ids.contains(id)));
        assert_eq!(q.identities(), g.identities());
        // too few identities: everything trains
        assert!(split_for_training(&data(3, 3), &cfg).val.is_none());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let d = data(4, 4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(0);
        let out = train(&genotype(), &tiny_macro(), &d, &cfg, Some(dir.path())).unwrap();
        let init = initial_model(&genotype(), &tiny_macro(), &d, &cfg).unwrap();
        assert_eq!(out.model.store, init.store);
        assert!(out.log.is_empty());
        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(dir.path().join("last.ckpt").exists());
    }

    #[test]
    fn overfits_two_identities() {
        let d = data(2, 4);
        let cfg = TrainConfig {
            steps_per_epoch: Some(20),
            lr: 0.01,
            ..quick(10)
        };
        let out = train(&genotype(), &tiny_macro(), &d, &cfg, None).unwrap();
        assert_eq!(out.step_losses.len(), 200);
        let last = out.log.last().unwrap();
        assert!(last.ce < 0.05, "ce {}", last.ce);
        let q = d.subset(&[0, 4]);
        let g = d.subset(&[1, 2, 3, 5, 6, 7]);
        let r = evaluate_sets(&out.model, &q, &g, &EvalOptions { camera_filter: false }, 8).unwrap();
        assert_eq!(r.rank(1), 1.0);
    }

    #[test]
    fn lambda_one_matches_cross_entropy_objective() {
        let d = data(4, 4);
        let mix = TrainConfig {
            loss: LossWeights { lambda: 1.0, ..Default::default() },
            ..quick(2)
        };
        let ce = TrainConfig {
            objective: LossKind::CrossEntropy,
            ..quick(2)
        };
        let a = train(&genotype(), &tiny_macro(), &d, &mix, None).unwrap();
        let b = train(&genotype(), &tiny_macro(), &d, &ce, None).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.model.store, b.model.store);
    }

    #[test]
    fn checkpoint_reproduces_metrics() {
        let d = data(6, 4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(2);
        let out = train(&genotype(), &tiny_macro(), &d, &cfg, Some(dir.path())).unwrap();
        let restored = load_checkpoint(&dir.path().join("last.ckpt")).unwrap().to_model().unwrap();
        let q = d.subset(&[0, 4, 8]);
        let g = d.subset(&[1, 2, 5, 6, 9, 10]);
        let opts = EvalOptions { camera_filter: false };
        let a = evaluate_sets(&out.model, &q, &g, &opts, 4).unwrap();
        let b = evaluate_sets(&restored, &q, &g, &opts, 4).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.cmc, b.cmc);
        let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
