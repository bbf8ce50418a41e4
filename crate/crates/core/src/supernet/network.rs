use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archspace::{AlphaParams, CellType, Genotype, MacroConfig, OpKind, SearchSpace};
use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, Ctx, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::cell::{Cell, CellTrace};

/// What the cells of a network are made of.
#[derive(Clone, Debug, PartialEq)]
pub enum NetworkKind {
    Supernet(SearchSpace),
    Final(Genotype),
}

impl NetworkKind {
    pub fn space(&self) -> SearchSpace {
        match self {
            NetworkKind::Supernet(s) => *s,
            NetworkKind::Final(g) => g.space,
        }
    }
}

/// Embedding and classifier layers on top of the pooled backbone feature.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub embed: Linear,
    pub classifier: Linear,
    pub dropout_f: f64,
    pub dropout_g: f64,
}

/// Outputs of one forward pass: pooled backbone feature `f`, embedding `g`
/// and identity logits `h`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub f: Var,
    pub g: Var,
    pub h: Var,
}

/// α logit tensors, `[block][input]` per cell type.
#[derive(Clone, Debug)]
pub struct AlphaIds {
    pub normal: Vec<Vec<ParamId>>,
    pub reduction: Vec<Vec<ParamId>>,
}

impl AlphaIds {
    pub fn cell(&self, kind: CellType) -> &[Vec<ParamId>] {
        match kind {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.normal.iter().chain(&self.reduction).flatten().copied()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub macro_cfg: MacroConfig,
    pub kind: NetworkKind,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub cells: Vec<Cell>,
    pub head: HeadParams,
    pub alpha: Option<AlphaIds>,
}

/// A network together with the values of its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
}

fn build_frame(
    m: &MacroConfig,
    kind: NetworkKind,
    seed: u64,
    mut cell: impl FnMut(&mut Builder, &crate::archspace::CellPlan, Option<&AlphaIds>) -> Result<Cell>,
) -> Result<Model> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = match &kind {
        NetworkKind::Supernet(space) => Some(alloc_alpha(&mut store, *space, m.blocks)),
        NetworkKind::Final(_) => None,
    };
    let mut b = Builder::new(&mut store, &mut rng);
    let stem = b.conv("stem", 3, m.channels, 3, Conv2dSpec::new(1, 1));
    let stem_bn = b.bn("stem_bn", m.channels);
    let mut cells = Vec::new();
    for plan in m.plan() {
        let mut sub = b.sub(&format!("cells.{}", plan.index));
        cells.push(cell(&mut sub, &plan, alpha.as_ref())?);
    }
    let mut hb = b.sub("head");
    let (fd, ed) = (m.feature_dim(), m.embed_dim);
    let head = HeadParams {
        embed: hb.linear("embed", fd, ed, true, (1.0 / fd as f64).sqrt()),
        classifier: hb.linear("classifier", ed, m.num_ids, true, (1.0 / ed as f64).sqrt()),
        dropout_f: m.dropout_f,
        dropout_g: m.dropout_g,
    };
    Ok(Model {
        net: Network {
            macro_cfg: m.clone(),
            kind,
            stem,
            stem_bn,
            cells,
            head,
            alpha,
        },
        store,
    })
}

fn alloc_alpha(store: &mut ParamStore, space: SearchSpace, blocks: usize) -> AlphaIds {
    let mut cell = |kind: CellType| {
        (0..blocks)
            .map(|i| {
                (0..2 + i)
                    .map(|j| {
                        let name = format!("alpha.{}.b{i}.in{j}", kind.name());
                        store.add(name, ParamGroup::Arch, Tensor::zeros(&[space.len()]))
                    })
                    .collect()
            })
            .collect()
    };
    AlphaIds {
        normal: cell(CellType::Normal),
        reduction: cell(CellType::Reduction),
    }
}

/// The relaxed search network over `space`, with every α at zero.
pub fn build_supernet(m: &MacroConfig, space: SearchSpace, seed: u64) -> Result<Model> {
    m.validate_for_space(space)?;
    build_frame(m, NetworkKind::Supernet(space), seed, |b, plan, alpha| {
        let ids = alpha.expect("supernet has alpha").cell(plan.kind);
        Cell::mixed(b, plan, space, ids, m.parts)
    })
}

/// The discrete network described by `g`. Parameter names match those of
/// the supernet for every operation the genotype keeps.
pub fn build_final_network(g: &Genotype, m: &MacroConfig, seed: u64) -> Result<Model> {
    m.validate_for_genotype(g)?;
    build_frame(m, NetworkKind::Final(g.clone()), seed, |b, plan, _| {
        Cell::fixed(b, plan, g.cell(plan.kind), m.parts)
    })
}

impl Network {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Outputs> {
        self.forward_traced(ctx, x, None)
    }

    /// Forward pass that also records every cell's intermediate values.
    pub fn forward_traced(&self, ctx: &mut Ctx, x: Var, mut traces: Option<&mut Vec<CellTrace>>) -> Result<Outputs> {
        let m = &self.macro_cfg;
        let shape = ctx.tape.shape(x);
        if shape.len() != 4 || shape[1..] != [3, m.input_hw[0], m.input_hw[1]] {
            return Err(Error::invalid(format!(
                "network expects [N, 3, {}, {}] images, got {shape:?}",
                m.input_hw[0], m.input_hw[1]
            )));
        }
        let y = self.stem.forward(ctx, x);
        let y = self.stem_bn.forward(ctx, y);
        let (mut s0, mut s1) = (y, y);
        for cell in &self.cells {
            let t = cell.trace(ctx, s0, s1)?;
            s0 = s1;
            s1 = t.out;
            if let Some(tr) = traces.as_deref_mut() {
                tr.push(t);
            }
        }
        let y = ctx.tape.relu(s1);
        let f = ctx.tape.global_avg_pool(y);
        let fd = ctx.dropout(f, self.head.dropout_f);
        let g = self.head.embed.forward(ctx, fd);
        let gd = ctx.dropout(g, self.head.dropout_g);
        let h = self.head.classifier.forward(ctx, gd);
        Ok(Outputs { f, g, h })
    }

    /// Current α values as nested logits.
    pub fn alpha_params(&self, store: &ParamStore) -> Option<AlphaParams> {
        let ids = self.alpha.as_ref()?;
        let space = self.kind.space();
        let read = |cell: &[Vec<ParamId>]| {
            cell.iter()
                .map(|row| row.iter().map(|&id| store.get(id).data().to_vec()).collect())
                .collect()
        };
        Some(AlphaParams {
            space,
            normal: read(&ids.normal),
            reduction: read(&ids.reduction),
        })
    }

    pub fn set_alpha(&self, store: &mut ParamStore, alpha: &AlphaParams) -> Result<()> {
        let ids = self
            .alpha
            .as_ref()
            .ok_or_else(|| Error::invalid("only a supernet carries alpha"))?;
        alpha.validate()?;
        if alpha.space != self.kind.space() || alpha.blocks() != self.macro_cfg.blocks {
            return Err(Error::invalid("alpha does not match the supernet's space or B"));
        }
        for kind in [CellType::Normal, CellType::Reduction] {
            for (row_ids, row) in ids.cell(kind).iter().zip(alpha.cell(kind)) {
                for (&id, logits) in row_ids.iter().zip(row) {
                    store.get_mut(id).data_mut().copy_from_slice(logits);
                }
            }
        }
        Ok(())
    }
}

/// Logits that make a supernet behave exactly like `g`: each kept edge is
/// saturated on its operation and every other edge on the zero operation.
pub fn one_hot_alpha(g: &Genotype) -> Result<AlphaParams> {
    g.validate()?;
    const OFF: f64 = -1000.0;
    let space = g.space;
    let mut alpha = AlphaParams::zeros(space, g.blocks());
    let zero = space.position(OpKind::Zero).expect("zero is in every space");
    for kind in [CellType::Normal, CellType::Reduction] {
        let blocks = g.cell(kind).to_vec();
        for (i, spec) in blocks.iter().enumerate() {
            if spec.input1 == spec.input2 {
                return Err(Error::invalid(format!(
                    "block {i} of the {} cell reads input {} twice; a supernet edge holds one operation",
                    kind.name(),
                    spec.input1
                )));
            }
            let row = &mut alpha.cell_mut(kind)[i];
            for (j, logits) in row.iter_mut().enumerate() {
                let keep = spec.edges().iter().find(|(input, _)| *input == j).map(|(_, op)| *op);
                let hot = match keep {
                    Some(op) => space.position(op).expect("validated op"),
                    None => zero,
                };
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = if k == hot { 0.0 } else { OFF };
                }
            }
        }
    }
    Ok(alpha)
}
