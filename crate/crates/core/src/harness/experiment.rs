//! The stages behind the command line: data preparation, search, training
//! and evaluation, each writing its artifacts into one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{DatasetKind, ExperimentConfig};
use super::dataset::{generate_synthetic, load_folder, synthetic_image_set, FolderIndex, ImageSet};
use crate::archspace::{derive_genotype, Genotype};
use crate::error::{Error, Result};
use crate::retrieval::{evaluate, extract_features, write_labeled, EvalOptions, EvalReport, EvalResult, LabeledFeatures};
use crate::searcher::{run_search, SearchOutcome};
use crate::supernet::{load_checkpoint, Model};
use crate::trainer::{train, TrainOutcome};

pub const GENOTYPE_FILE: &str = "genotype.json";
pub const EVAL_REPORT: &str = "eval_report.json";

/// Training pool plus the query and gallery used for the final metrics.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub train: ImageSet,
    pub query: ImageSet,
    pub gallery: ImageSet,
}

/// Holds out `round(fraction * n)` images of every identity with `n` images,
/// the first half (at least one) as queries and the rest as gallery. An
/// identity keeps all its images for training when fewer than two would be
/// held out or fewer than two would remain.
pub fn holdout_split(data: &ImageSet, fraction: f64) -> Result<EvalSplit> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in data.ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());
    for members in by_id.values() {
        let n = members.len();
        let held = (fraction * n as f64).round() as usize;
        if held < 2 || n - held < 2 {
            train.extend(members);
            continue;
        }
        let (keep, out) = members.split_at(n - held);
        let nq = (held / 2).max(1);
        train.extend(keep);
        query.extend(&out[..nq]);
        gallery.extend(&out[nq..]);
    }
    if query.is_empty() {
        return Err(Error::invalid(format!(
            "holdout fraction {fraction} leaves no identity with query and gallery images"
        )));
    }
    Ok(EvalSplit {
        train: data.subset(&train),
        query: data.subset(&query),
        gallery: data.subset(&gallery),
    })
}

/// Loads two folders with identities matched by directory name.
pub fn load_query_gallery(query: &Path, gallery: &Path, hw: [usize; 2]) -> Result<(ImageSet, ImageSet)> {
    let (mut q, mut g) = (load_folder(query)?, load_folder(gallery)?);
    let mut names: Vec<String> = q.identities.iter().chain(&g.identities).cloned().collect();
    names.sort();
    names.dedup();
    let remap = |index: &mut FolderIndex| {
        for e in &mut index.entries {
            e.id = names.binary_search(&index.identities[e.id]).expect("name present");
        }
    };
    remap(&mut q);
    remap(&mut g);
    Ok((ImageSet::from_index(&q, hw)?, ImageSet::from_index(&g, hw)?))
}

/// The images every stage works from, resized to the network input.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<EvalSplit> {
    let ds = &cfg.dataset;
    let hw = cfg.macro_cfg.input_hw;
    let pool = match (ds.kind, &ds.root) {
        (DatasetKind::Folder, None) => return Err(Error::Config("dataset.root is required".into())),
        (DatasetKind::Folder, Some(root)) => ImageSet::from_index(&load_folder(root)?, hw)?,
        (DatasetKind::Synthetic, _) => {
            let root = data_root(cfg);
            if root.exists() {
                ImageSet::from_index(&load_folder(&root)?, hw)?
            } else {
                synthetic_image_set(&ds.synthetic, hw)?
            }
        }
    };
    match (&ds.query, &ds.gallery) {
        (Some(q), Some(g)) => {
            let (query, gallery) = load_query_gallery(q, g, hw)?;
            Ok(EvalSplit {
                train: pool,
                query,
                gallery,
            })
        }
        _ => holdout_split(&pool, ds.holdout_fraction),
    }
}

/// Where `gen-data` writes: `dataset.root`, else `<out_dir>/data`.
pub fn data_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dataset.root.clone().unwrap_or_else(|| cfg.out_dir.join("data"))
}

pub fn gen_data_stage(cfg: &ExperimentConfig) -> Result<(PathBuf, usize)> {
    let root = data_root(cfg);
    let n = generate_synthetic(&cfg.dataset.synthetic, &root)?;
    Ok((root, n))
}

pub fn search_stage(cfg: &ExperimentConfig, dir: &Path) -> Result<SearchOutcome> {
    let data = load_dataset(cfg)?;
    run_search(&cfg.search, &cfg.macro_cfg, &data.train, Some(dir))
}

pub fn train_stage(cfg: &ExperimentConfig, g: &Genotype, dir: &Path) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_genotype(&dir.join(GENOTYPE_FILE), g)?;
    train(g, &cfg.macro_cfg, &data.train, &cfg.train, Some(dir))
}

pub fn eval_options(cfg: &ExperimentConfig, query: &LabeledFeatures, gallery: &LabeledFeatures) -> EvalOptions {
    let has_cams = query.cams.iter().chain(&gallery.cams).any(Option::is_some);
    EvalOptions {
        camera_filter: cfg.eval.camera_filter.unwrap_or(has_cams),
    }
}

/// Scores `model` on the held-out query and gallery. Writes both feature
/// dumps and `eval_report.json` into `dir`.
pub fn eval_model_stage(cfg: &ExperimentConfig, model: &Model, dir: &Path) -> Result<(EvalResult, EvalReport)> {
    let data = load_dataset(cfg)?;
    let feats = |set: &ImageSet| {
        LabeledFeatures::new(extract_features(model, &set.images, cfg.eval.batch)?, set.ids.clone(), set.cams.clone())
    };
    let (q, g) = (feats(&data.query)?, feats(&data.gallery)?);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_labeled(&dir.join("query.feat"), &q)?;
    write_labeled(&dir.join("gallery.feat"), &g)?;
    eval_features_stage(cfg, &q, &g, dir)
}

pub fn eval_features_stage(
    cfg: &ExperimentConfig,
    q: &LabeledFeatures,
    g: &LabeledFeatures,
    dir: &Path,
) -> Result<(EvalResult, EvalReport)> {
    let result = evaluate(q, g, &eval_options(cfg, q, g))?;
    let report = EvalReport::new(&result);
    report.write(&dir.join(EVAL_REPORT))?;
    Ok((result, report))
}

/// Discretizes the architecture logits stored in a supernet checkpoint.
pub fn derive_from_checkpoint(path: &Path) -> Result<Genotype> {
    let model = load_checkpoint(path)?.to_model()?;
    let alpha = model
        .net
        .alpha_params(&model.store)
        .ok_or_else(|| Error::invalid(format!("{} holds no architecture parameters", path.display())))?;
    derive_genotype(&alpha)
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Genotype::from_json(&text)
}

pub fn write_genotype(path: &Path, g: &Genotype) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, g.to_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SyntheticSpec;

    fn pool(ids: usize, imgs: usize) -> ImageSet {
        let spec = SyntheticSpec {
            num_ids: ids,
            imgs_per_id: imgs,
            height: 16,
            width: 8,
            ..Default::default()
        };
        synthetic_image_set(&spec, [16, 8]).unwrap()
    }

    #[test]
    fn holdout_keeps_every_identity_in_training() {
        let d = pool(8, 16);
        let s = holdout_split(&d, 0.25).unwrap();
        assert_eq!((s.train.len(), s.query.len(), s.gallery.len()), (96, 16, 16));
        assert_eq!(s.train.identities(), d.identities());
        assert_eq!(s.query.identities(), d.identities());
        assert_eq!(s.gallery.identities(), d.identities());
    }

    #[test]
    fn holdout_skips_small_identities() {
        let d = pool(3, 3);
        assert!(holdout_split(&d, 0.25).is_err());
        let s = holdout_split(&pool(3, 5), 0.5).unwrap();
        // round(2.5) = 3 held, 2 kept: 1 query and 2 gallery per identity
        assert_eq!((s.train.len(), s.query.len(), s.gallery.len()), (6, 3, 6));
    }

    #[test]
    fn folder_pairs_align_identity_names() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_ids: 3,
            imgs_per_id: 2,
            height: 16,
            width: 8,
            ..Default::default()
        };
        let (q, g) = (dir.path().join("q"), dir.path().join("g"));
        generate_synthetic(&spec, &g).unwrap();
        generate_synthetic(&spec, &q).unwrap();
        fs::remove_dir_all(q.join("0000")).unwrap();
        let (qs, gs) = load_query_gallery(&q, &g, [16, 8]).unwrap();
        assert_eq!(qs.identities(), vec![1, 2]);
        assert_eq!(gs.identities(), vec![0, 1, 2]);
        assert_eq!(qs.images.select_rows(&[0]), gs.images.select_rows(&[2]));
    }
}
