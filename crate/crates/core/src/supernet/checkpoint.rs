//! Binary checkpoints.
//!
//! Layout: the 4-byte magic `ARCK`, a little-endian `u32` format version, a
//! `u64` header length, a UTF-8 JSON header, then every tensor and optimizer
//! state vector as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::archspace::{Genotype, MacroConfig, SearchSpace};
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::optim::OptimState;
use crate::tensor::Tensor;

use super::network::{build_final_network, build_supernet, Model, NetworkKind};

const MAGIC: &[u8; 4] = b"ARCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    pub macro_cfg: MacroConfig,
    pub epoch: usize,
    /// Every parameter, α and running statistic.
    pub store: ParamStore,
    /// Optimizer states by role, e.g. `"weights"` and `"alpha"`.
    pub optim: BTreeMap<String, OptimState>,
    /// Free-form extra information (seeds, metrics).
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    space: SearchSpace,
    genotype: Option<Value>,
    #[serde(rename = "macro")]
    macro_cfg: MacroConfig,
    epoch: usize,
    meta: Value,
    tensors: Vec<TensorHeader>,
    /// role -> [(key, length)]
    optim: BTreeMap<String, Vec<(String, usize)>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: usize) -> Self {
        Checkpoint {
            kind: model.net.kind.clone(),
            macro_cfg: model.net.macro_cfg.clone(),
            epoch,
            store: model.store.clone(),
            optim: BTreeMap::new(),
            meta: Value::Null,
        }
    }

    /// Rebuilds the network and fills it with the stored values. Fails if
    /// any parameter is missing or has the wrong shape.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = match &self.kind {
            NetworkKind::Supernet(space) => build_supernet(&self.macro_cfg, *space, 0)?,
            NetworkKind::Final(g) => build_final_network(g, &self.macro_cfg, 0)?,
        };
        if model.store.len() != self.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, network needs {}",
                self.store.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.entries().map(|(id, _)| id).collect();
        for id in ids {
            let name = model.store.entry(id).name.clone();
            let src = self
                .store
                .id(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
            let value = self.store.get(src);
            if value.shape() != model.store.get(id).shape() {
                return Err(Error::invalid(format!("tensor {name} has shape {:?}", value.shape())));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let genotype = match &ckpt.kind {
        NetworkKind::Final(g) => Some(serde_json::from_str(&g.to_json()).expect("genotype json is valid")),
        NetworkKind::Supernet(_) => None,
    };
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |xs: &[f64]| {
        for x in xs {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    };
    let mut tensors = Vec::new();
    for (_, e) in ckpt.store.entries() {
        tensors.push(TensorHeader {
            name: e.name.clone(),
            group: e.group,
            shape: e.value.shape().to_vec(),
        });
        push(e.value.data());
    }
    let mut optim = BTreeMap::new();
    for (role, state) in &ckpt.optim {
        let mut keys = Vec::new();
        for (k, v) in state {
            keys.push((k.clone(), v.len()));
            push(v);
        }
        optim.insert(role.clone(), keys);
    }
    let header = Header {
        space: ckpt.kind.space(),
        genotype,
        macro_cfg: ckpt.macro_cfg.clone(),
        epoch: ckpt.epoch,
        meta: ckpt.meta.clone(),
        tensors,
        optim,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::parse(path.display().to_string(), msg);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
    let mut payload = body[hlen..].chunks_exact(8);
    if payload.remainder().len() != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let out: Vec<f64> = payload
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.len() == n {
            Ok(out)
        } else {
            Err(bad("truncated payload"))
        }
    };
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n = t.shape.iter().product();
        store.add(t.name.clone(), t.group, Tensor::new(t.shape.clone(), take(n)?));
    }
    let mut optim = BTreeMap::new();
    for (role, keys) in &header.optim {
        let mut state = OptimState::new();
        for (k, n) in keys {
            state.insert(k.clone(), take(*n)?);
        }
        optim.insert(role.clone(), state);
    }
    if take(1).is_ok() {
        return Err(bad("trailing bytes after payload"));
    }
    let kind = match header.genotype {
        Some(v) => NetworkKind::Final(Genotype::from_json(&v.to_string())?),
        None => NetworkKind::Supernet(header.space),
    };
    Ok(Checkpoint {
        kind,
        macro_cfg: header.macro_cfg,
        epoch: header.epoch,
        store,
        optim,
        meta: header.meta,
    })
}
