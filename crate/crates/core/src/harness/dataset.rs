//! Image sets: a synthetic generator with per-identity signatures, an
//! image-folder loader, and the in-memory form the training loops consume.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the synthetic identity generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` intensity units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_ids: 8,
            imgs_per_id: 16,
            height: 64,
            width: 32,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 || self.imgs_per_id < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 identities and 2 images each"));
        }
        if self.height < 4 || self.width < 2 {
            return Err(Error::invalid("synthetic images must be at least 4x2"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// Appearance shared by every image of one synthetic identity: an upper and
/// a lower garment colour plus horizontal stripes on one of them.
#[derive(Clone, Debug)]
struct Signature {
    upper: [f64; 3],
    lower: [f64; 3],
    stripe: [f64; 3],
    stripe_period: usize,
    stripes_on_upper: bool,
    split: f64,
}

impl Signature {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut colour = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let (upper, lower, stripe) = (colour(), colour(), colour());
        Signature {
            upper,
            lower,
            stripe,
            stripe_period: rng.random_range(2..6),
            stripes_on_upper: rng.random_bool(0.5),
            split: rng.random_range(0.35..0.65),
        }
    }

    fn pixel(&self, y: usize, h: usize) -> [f64; 3] {
        let upper = (y as f64) < self.split * h as f64;
        let striped = upper == self.stripes_on_upper && (y / self.stripe_period) % 2 == 1;
        if striped {
            self.stripe
        } else if upper {
            self.upper
        } else {
            self.lower
        }
    }
}

/// Renders every image of the synthetic set, identity-major.
pub fn render_synthetic(spec: &SyntheticSpec) -> Result<Vec<(usize, RgbImage)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut out = Vec::with_capacity(spec.num_ids * spec.imgs_per_id);
    for id in 0..spec.num_ids {
        let sig = Signature::draw(&mut rng);
        for _ in 0..spec.imgs_per_id {
            let mut img = RgbImage::new(spec.width as u32, spec.height as u32);
            for y in 0..spec.height {
                let base = sig.pixel(y, spec.height);
                for x in 0..spec.width {
                    let mut px = [0u8; 3];
                    for (c, v) in px.iter_mut().enumerate() {
                        let jitter = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        *v = ((base[c] + jitter).clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                    img.put_pixel(x as u32, y as u32, Rgb(px));
                }
            }
            out.push((id, img));
        }
    }
    Ok(out)
}

/// Writes `root/<id>/<n>.png` for every identity and image. Returns the
/// number of files written.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<usize> {
    let images = render_synthetic(spec)?;
    for (i, (id, img)) in images.iter().enumerate() {
        let dir = root.join(format!("{id:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{:04}.png", i % spec.imgs_per_id));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(images.len())
}

/// The synthetic set decoded straight into memory at size `hw`, identical
/// to writing it with [`generate_synthetic`] and loading it back.
pub fn synthetic_image_set(spec: &SyntheticSpec, hw: [usize; 2]) -> Result<ImageSet> {
    let images = render_synthetic(spec)?;
    let mut data = Vec::with_capacity(images.len() * 3 * hw[0] * hw[1]);
    for (_, img) in &images {
        push_planes(&mut data, img.clone(), hw);
    }
    ImageSet::new(
        Tensor::new(vec![images.len(), 3, hw[0], hw[1]], data),
        images.iter().map(|(id, _)| *id).collect(),
        vec![None; images.len()],
    )
}

/// Appends `rgb`, resized to `hw` when needed, as normalized channel planes.
fn push_planes(data: &mut Vec<f64>, mut rgb: RgbImage, hw: [usize; 2]) {
    let [h, w] = hw;
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data.push(rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 127.5 - 1.0);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub path: PathBuf,
    /// Position of the identity directory in sorted order.
    pub id: usize,
    pub camera: Option<usize>,
}

/// Decodable images found under an identity-per-directory tree.
#[derive(Clone, Debug, Default)]
pub struct FolderIndex {
    pub entries: Vec<IndexEntry>,
    /// Directory name of each identity.
    pub identities: Vec<String>,
    /// One message per skipped file.
    pub warnings: Vec<String>,
}

impl FolderIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Camera id from a `_c<k>` suffix of the file stem, e.g. `0001_c3.png`.
pub fn parse_camera(file_name: &str) -> Option<usize> {
    let stem = file_name.rsplit_once('.').map_or(file_name, |(s, _)| s);
    let (_, tail) = stem.rsplit_once("_c")?;
    tail.parse().ok()
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Indexes `root/<identity>/<image>`. Files that fail to decode are skipped
/// with a warning; identities left without images are dropped.
pub fn load_folder(root: &Path) -> Result<FolderIndex> {
    let mut index = FolderIndex::default();
    for dir in sorted_children(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut found = Vec::new();
        for path in sorted_children(&dir)? {
            if !path.is_file() {
                continue;
            }
            match image::open(&path) {
                Ok(_) => found.push(path),
                Err(e) => {
                    let msg = format!("skipping {}: {e}", path.display());
                    log::warn!("{msg}");
                    index.warnings.push(msg);
                }
            }
        }
        if found.is_empty() {
            continue;
        }
        let id = index.identities.len();
        index.identities.push(name);
        for path in found {
            let camera = parse_camera(&path.file_name().unwrap_or_default().to_string_lossy());
            index.entries.push(IndexEntry { path, id, camera });
        }
    }
    if index.is_empty() {
        return Err(Error::invalid(format!("no decodable images under {}", root.display())));
    }
    Ok(index)
}

/// Images held in memory as normalized `[3, H, W]` planes, with identity
/// and optional camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub hw: [usize; 2],
    /// `[N, 3, H, W]`, intensities mapped to `[-1, 1]`.
    pub images: Tensor,
    pub ids: Vec<usize>,
    pub cams: Vec<Option<usize>>,
}

impl ImageSet {
    pub fn new(images: Tensor, ids: Vec<usize>, cams: Vec<Option<usize>>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[0] != ids.len() || ids.len() != cams.len() {
            return Err(Error::invalid(format!(
                "image tensor {s:?} does not match {} labels",
                ids.len()
            )));
        }
        Ok(ImageSet {
            hw: [s[2], s[3]],
            images,
            ids,
            cams,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            hw: self.hw,
            images: self.images.select_rows(indices),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            cams: indices.iter().map(|&i| self.cams[i]).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.images.select_rows(indices)
    }

    /// Distinct identities in increasing order.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids = self.ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Each sample's identity renumbered to `0..identities().len()`.
    pub fn class_labels(&self) -> Vec<usize> {
        let ids = self.identities();
        self.ids.iter().map(|i| ids.binary_search(i).expect("own id")).collect()
    }

    /// Decodes every indexed image, resizing to `hw` when needed.
    pub fn from_index(index: &FolderIndex, hw: [usize; 2]) -> Result<Self> {
        let [h, w] = hw;
        let mut data = Vec::with_capacity(index.len() * 3 * h * w);
        for e in &index.entries {
            let img = image::open(&e.path).map_err(|err| Error::Image {
                path: e.path.clone(),
                msg: err.to_string(),
            })?;
            push_planes(&mut data, img.to_rgb8(), hw);
        }
        let images = Tensor::new(vec![index.len(), 3, h, w], data);
        ImageSet::new(
            images,
            index.entries.iter().map(|e| e.id).collect(),
            index.entries.iter().map(|e| e.camera).collect(),
        )
    }
}
