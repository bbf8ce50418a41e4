//! Experiment configuration: one TOML document with a section per stage.
//!
//! ```toml
//! seed = 0
//! mode = "deterministic"
//! out_dir = "runs/demo"
//!
//! [macro]
//! channels = 4
//! layers = [1, 1, 1, 1]
//! blocks = 2
//! input_hw = [32, 16]
//!
//! [search]
//! epochs = 20
//!
//! [train]
//! epochs = 30
//! milestones = [20]
//!
//! [dataset]
//! kind = "synthetic"
//! holdout_fraction = 0.25
//!
//! [dataset.synthetic]
//! num_ids = 8
//! imgs_per_id = 16
//!
//! [eval]
//! batch = 32
//! ```
//!
//! Every field has a default, so an empty file is a valid configuration.
//! `search.seed` and `train.seed` are overwritten by the top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::SyntheticSpec;
use crate::archspace::MacroConfig;
use crate::error::{Error, Result};
use crate::searcher::SearchConfig;
use crate::trainer::TrainConfig;

pub const RESOLVED_CONFIG: &str = "config_resolved.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Use `seed` as given.
    #[default]
    Deterministic,
    /// Draw a fresh seed at resolution time; the resolved config records it.
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Image folder `root/<identity>/<image>`. For synthetic data this is
    /// where `gen-data` writes (default `<out_dir>/data`) and, when it
    /// exists, what later stages read; otherwise the images are generated
    /// in memory.
    pub root: Option<PathBuf>,
    /// Separate query and gallery folders. Without them a share of every
    /// identity's images is held out for evaluation.
    pub query: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    /// Share of each identity's images held out when no query folder is set.
    pub holdout_fraction: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            root: None,
            query: None,
            gallery: None,
            holdout_fraction: 0.25,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Drop same-identity same-camera gallery entries. Unset means on
    /// whenever camera ids are known.
    pub camera_filter: Option<bool>,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            camera_filter: None,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub out_dir: PathBuf,
    #[serde(rename = "macro")]
    pub macro_cfg: MacroConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: RunMode::Deterministic,
            out_dir: PathBuf::from("runs/default"),
            macro_cfg: MacroConfig::default(),
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults), applies `key.path=value`
    /// overrides in order and resolves the seeds.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve()
    }

    /// Fans the top-level seed out to the stages and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        if self.mode == RunMode::Random {
            self.seed = rand::random();
            self.mode = RunMode::Deterministic;
        }
        self.search.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.macro_cfg.validate()?;
        self.macro_cfg.validate_for_space(self.search.space)?;
        self.search.validate()?;
        self.train.validate()?;
        self.dataset.synthetic.validate()?;
        if !(0.0..1.0).contains(&self.dataset.holdout_fraction) {
            return Err(Error::Config(format!(
                "dataset.holdout_fraction must lie in [0, 1), got {}",
                self.dataset.holdout_fraction
            )));
        }
        if self.dataset.kind == DatasetKind::Folder && self.dataset.root.is_none() {
            return Err(Error::Config("dataset.root is required for folder datasets".into()));
        }
        if self.dataset.query.is_some() != self.dataset.gallery.is_some() {
            return Err(Error::Config("dataset.query and dataset.gallery go together".into()));
        }
        if self.eval.batch == 0 {
            return Err(Error::Config("eval.batch must be positive".into()));
        }
        Ok(())
    }

    /// Writes `config_resolved.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables. The value
/// is read as a TOML literal and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses a compact macro description such as `C=64,l=2.2.2.2,hw=384x128`
/// on top of `base`. Keys: `C` channels, `l` cells per stage, `B` blocks,
/// `hw` input size, `ids` classifier width, `d` embedding width, `parts`.
pub fn parse_macro_spec(spec: &str, base: &MacroConfig) -> Result<MacroConfig> {
    let bad = |msg: String| Error::Config(format!("macro spec `{spec}`: {msg}"));
    let mut m = base.clone();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("`{item}` is not key=value")))?;
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("`{s}` is not a count")));
        match k.trim() {
            "C" | "c" => m.channels = num(v)?,
            "B" | "b" => m.blocks = num(v)?,
            "ids" => m.num_ids = num(v)?,
            "d" => m.embed_dim = num(v)?,
            "parts" => m.parts = num(v)?,
            "l" => {
                let l: Vec<usize> = v.split('.').map(num).collect::<Result<_>>()?;
                m.layers = l.try_into().map_err(|_| bad("`l` needs four stage counts".into()))?;
            }
            "hw" => {
                let (h, w) = v.split_once('x').ok_or_else(|| bad("`hw` is HxW".into()))?;
                m.input_hw = [num(h)?, num(w)?];
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    m.validate()?;
    Ok(m)
}
