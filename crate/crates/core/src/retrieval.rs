//! Retrieval evaluation: embedding extraction, distance ranking, CMC and
//! mean average precision, plus the on-disk feature and report formats.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::supernet::Model;
use crate::tensor::Tensor;

/// Embeddings `g` of `images` (`[N, 3, H, W]`) in evaluation mode, computed
/// `batch` images at a time.
pub fn extract_features(model: &Model, images: &Tensor, batch: usize) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::invalid(format!("expected [N, 3, H, W] images, got {:?}", images.shape())));
    }
    let n = images.dim(0);
    let batch = batch.max(1);
    let mut parts = Vec::new();
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let mut ctx = Ctx::eval(&model.store);
        let x = ctx.input(images.select_rows(&idx));
        let out = model.net.forward(&mut ctx, x)?;
        parts.push(ctx.value(out.g).clone());
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, model.net.macro_cfg.embed_dim]));
    }
    Ok(Tensor::stack_rows(&parts))
}

/// Feature rows with their identity and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    /// `[N, d]`
    pub feats: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<Option<usize>>,
}

impl LabeledFeatures {
    pub fn new(feats: Tensor, ids: Vec<usize>, cams: Vec<Option<usize>>) -> Result<Self> {
        if feats.rank() != 2 || feats.dim(0) != ids.len() || ids.len() != cams.len() {
            return Err(Error::invalid(format!(
                "features {:?} do not match {} ids and {} cameras",
                feats.shape(),
                ids.len(),
                cams.len()
            )));
        }
        Ok(LabeledFeatures { feats, ids, cams })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Drop gallery entries sharing both identity and camera with the query.
    pub camera_filter: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { camera_filter: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// `[Q, G]` Euclidean distances.
    pub dist: Tensor,
    /// `cmc[k - 1]`: fraction of valid queries with a match in the top `k`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision per query; `None` for queries without a match.
    pub ap: Vec<Option<f64>>,
    pub valid_queries: usize,
}

impl EvalResult {
    /// CMC at rank `k`, saturating past the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1);
        self.cmc[k.min(self.cmc.len()) - 1]
    }
}

pub fn euclidean_distances(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || g.rank() != 2 || q.dim(1) != g.dim(1) {
        return Err(Error::invalid(format!(
            "cannot compare features {:?} and {:?}",
            q.shape(),
            g.shape()
        )));
    }
    let (nq, ng) = (q.dim(0), g.dim(0));
    let mut d = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let a = q.row(i);
        for j in 0..ng {
            let s: f64 = a.iter().zip(g.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            d.push(s.sqrt());
        }
    }
    Ok(Tensor::new(vec![nq, ng], d))
}

/// Gallery positions ordered by increasing distance; ties by position.
pub fn rank_gallery(dist_row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist_row.len()).collect();
    order.sort_by(|&a, &b| dist_row[a].total_cmp(&dist_row[b]).then(a.cmp(&b)));
    order
}

/// Mean of the precision at each relevant position of a ranked list.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

pub fn evaluate(query: &LabeledFeatures, gallery: &LabeledFeatures, opts: &EvalOptions) -> Result<EvalResult> {
    let dist = euclidean_distances(&query.feats, &gallery.feats)?;
    let ng = gallery.len();
    let mut cmc_hits = vec![0usize; ng.max(1)];
    let mut ap = Vec::with_capacity(query.len());
    for i in 0..query.len() {
        let (qid, qcam) = (query.ids[i], query.cams[i]);
        let junk = |j: usize| {
            opts.camera_filter && gallery.ids[j] == qid && qcam.is_some() && gallery.cams[j] == qcam
        };
        let relevant: Vec<bool> = rank_gallery(&dist.data()[i * ng..(i + 1) * ng])
            .into_iter()
            .filter(|&j| !junk(j))
            .map(|j| gallery.ids[j] == qid)
            .collect();
        let q_ap = average_precision(&relevant);
        if q_ap.is_some() {
            let first = relevant.iter().position(|&r| r).expect("has a hit");
            for c in &mut cmc_hits[first..] {
                *c += 1;
            }
        }
        ap.push(q_ap);
    }
    let valid = ap.iter().flatten().count();
    if valid == 0 {
        return Err(Error::invalid("no query has a matching gallery entry"));
    }
    Ok(EvalResult {
        dist,
        cmc: cmc_hits.iter().map(|&c| c as f64 / valid as f64).collect(),
        map: ap.iter().flatten().sum::<f64>() / valid as f64,
        ap,
        valid_queries: valid,
    })
}

const FEATURE_MAGIC: &[u8; 4] = b"RIDF";
const FEATURE_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

/// Writes `feats` (`[N, d]`) as: magic `RIDF`, `u32` version, `u32` dtype
/// tag (1 = f32), `u64` rows, `u64` cols, then row-major little-endian f32.
pub fn write_features(path: &Path, feats: &Tensor) -> Result<()> {
    if feats.rank() != 2 {
        return Err(Error::invalid("feature dump needs a [N, d] matrix"));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(FEATURE_MAGIC)?;
    put(&FEATURE_VERSION.to_le_bytes())?;
    put(&DTYPE_F32.to_le_bytes())?;
    put(&(feats.dim(0) as u64).to_le_bytes())?;
    put(&(feats.dim(1) as u64).to_le_bytes())?;
    for v in feats.data() {
        put(&(*v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::parse(path.display().to_string(), msg);
    if bytes.len() < 28 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature dump".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {}", u32_at(4))));
    }
    if u32_at(8) != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype tag {}", u32_at(8))));
    }
    let (rows, cols) = (u64_at(12) as usize, u64_at(20) as usize);
    let body = &bytes[28..];
    if body.len() != rows * cols * 4 {
        return Err(bad(format!("expected {} values, found {} bytes", rows * cols, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(vec![rows, cols], data))
}

/// Sidecar holding the labels of a feature dump.
pub fn labels_path(features: &Path) -> PathBuf {
    let mut s = features.as_os_str().to_owned();
    s.push(".labels.csv");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: usize,
    camera: Option<usize>,
}

/// Writes the features and their `id,camera` sidecar.
pub fn write_labeled(path: &Path, set: &LabeledFeatures) -> Result<()> {
    write_features(path, &set.feats)?;
    let lp = labels_path(path);
    let mut w = csv::Writer::from_path(&lp).map_err(|e| Error::io(&lp, e.into()))?;
    for (&id, &camera) in set.ids.iter().zip(&set.cams) {
        w.serialize(LabelRow { id, camera }).map_err(|e| Error::io(&lp, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&lp, e))
}

pub fn read_labeled(path: &Path) -> Result<LabeledFeatures> {
    let feats = read_features(path)?;
    let lp = labels_path(path);
    let mut r = csv::Reader::from_path(&lp).map_err(|e| Error::io(&lp, e.into()))?;
    let mut ids = Vec::new();
    let mut cams = Vec::new();
    for (line, row) in r.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(format!("{}:{}", lp.display(), line + 2), e.to_string()))?;
        ids.push(row.id);
        cams.push(row.camera);
    }
    LabeledFeatures::new(feats, ids, cams)
}

/// Contents of `eval_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid_queries: usize,
}

impl EvalReport {
    pub fn new(r: &EvalResult) -> Self {
        let ranks = vec![1, 5, 10];
        EvalReport {
            cmc: ranks.iter().map(|&k| r.rank(k)).collect(),
            ranks,
            map: r.map,
            valid_queries: r.valid_queries,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
