use serde::{Deserialize, Serialize};

use super::genotype::Genotype;
use super::ops::{CellType, OpKind, SearchSpace};
use crate::error::{Error, Result};

/// The fixed skeleton around the searched cells: a 3x3 stem followed by four
/// stages of cells whose width doubles at each stage, then the
/// pool -> embedding -> classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroConfig {
    /// Stem width `C`; stage `k` has width `C * 2^k`.
    pub channels: usize,
    /// Cells per stage.
    pub layers: [usize; 4],
    /// Blocks per cell.
    pub blocks: usize,
    /// Input (height, width) in pixels.
    pub input_hw: [usize; 2],
    pub num_ids: usize,
    pub embed_dim: usize,
    pub dropout_f: f64,
    pub dropout_g: f64,
    /// Body-part count of the part-aware operation.
    pub parts: usize,
}

impl Default for MacroConfig {
    fn default() -> Self {
        MacroConfig {
            channels: 32,
            layers: [2, 2, 2, 2],
            blocks: 4,
            input_hw: [384, 128],
            num_ids: 751,
            embed_dim: 512,
            dropout_f: 0.5,
            dropout_g: 0.5,
            parts: 4,
        }
    }
}

/// Channel count and spatial size of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Static layout of one cell within the skeleton.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub index: usize,
    pub stage: usize,
    pub kind: CellType,
    /// Width of every operation in the cell and of the cell output.
    pub width: usize,
    /// Output of cell `k-2` (or the stem).
    pub in0: FeatureShape,
    /// Output of cell `k-1` (or the stem).
    pub in1: FeatureShape,
    /// Stride of the 1x1 projection applied to `in0` so it matches `in1`.
    pub pre0_stride: usize,
    pub out: FeatureShape,
}

impl CellPlan {
    pub fn is_reduction(&self) -> bool {
        self.kind == CellType::Reduction
    }

    /// Stride of the edge from candidate input `j`.
    pub fn edge_stride(&self, input: usize) -> usize {
        if self.is_reduction() && input < 2 {
            2
        } else {
            1
        }
    }

    /// Spatial size seen by an edge from candidate input `j`.
    pub fn edge_input_hw(&self, input: usize) -> (usize, usize) {
        if input < 2 {
            (self.in1.h, self.in1.w)
        } else {
            (self.out.h, self.out.w)
        }
    }
}

impl MacroConfig {
    pub fn stage_width(&self, stage: usize) -> usize {
        self.channels << stage
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_width(3)
    }

    pub fn total_cells(&self) -> usize {
        self.layers.iter().sum()
    }

    /// Checks the skeleton-level invariants.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("C must be at least 1"));
        }
        if self.layers.contains(&0) {
            return Err(Error::invalid("every stage needs at least one cell"));
        }
        if self.blocks == 0 {
            return Err(Error::invalid("B must be at least 1"));
        }
        let [h, w] = self.input_hw;
        if h == 0 || h % 16 != 0 {
            return Err(Error::invalid(format!("input height {h} must be a positive multiple of 16")));
        }
        if w == 0 || w % 8 != 0 {
            return Err(Error::invalid(format!("input width {w} must be a positive multiple of 8")));
        }
        if self.num_ids == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("num_ids and embed_dim must be positive"));
        }
        for p in [self.dropout_f, self.dropout_g] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout {p} outside [0, 1)")));
            }
        }
        if self.parts == 0 {
            return Err(Error::invalid("part count must be at least 1"));
        }
        Ok(())
    }

    /// Validates the skeleton and, if the part-aware operation is available
    /// anywhere, that every feature height it can see splits into `parts`
    /// equal bands.
    pub fn validate_for_space(&self, space: SearchSpace) -> Result<()> {
        self.validate()?;
        if space.contains(OpKind::PartAware) {
            for cell in self.plan() {
                self.check_parts(&cell, 0)?;
                // intra-cell inputs exist only from the second block on
                if self.blocks > 1 {
                    self.check_parts(&cell, 2)?;
                }
            }
        }
        Ok(())
    }

    /// Validates the skeleton against the edges a genotype actually uses.
    pub fn validate_for_genotype(&self, g: &Genotype) -> Result<()> {
        self.validate()?;
        g.validate()?;
        if g.blocks() != self.blocks {
            return Err(Error::invalid(format!(
                "genotype has B={} but macro config has B={}",
                g.blocks(),
                self.blocks
            )));
        }
        for cell in self.plan() {
            for block in g.cell(cell.kind) {
                for (input, op) in block.edges() {
                    if op == OpKind::PartAware {
                        self.check_parts(&cell, input)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_parts(&self, cell: &CellPlan, input: usize) -> Result<()> {
        let (h, _) = cell.edge_input_hw(input);
        if h % self.parts != 0 {
            return Err(Error::invalid(format!(
                "cell {} sees height {h}, not divisible into {} parts",
                cell.index, self.parts
            )));
        }
        Ok(())
    }

    pub fn stem_shape(&self) -> FeatureShape {
        FeatureShape {
            c: self.channels,
            h: self.input_hw[0],
            w: self.input_hw[1],
        }
    }

    /// Layout of every cell in order. The first cell of stages 2-4 is a
    /// reduction cell.
    pub fn plan(&self) -> Vec<CellPlan> {
        let stem = self.stem_shape();
        let (mut prev_prev, mut prev) = (stem, stem);
        let mut cells = Vec::with_capacity(self.total_cells());
        for (stage, &count) in self.layers.iter().enumerate() {
            for j in 0..count {
                let kind = if stage > 0 && j == 0 {
                    CellType::Reduction
                } else {
                    CellType::Normal
                };
                let width = self.stage_width(stage);
                let div = if kind == CellType::Reduction { 2 } else { 1 };
                let out = FeatureShape {
                    c: width,
                    h: prev.h / div,
                    w: prev.w / div,
                };
                let pre0_stride = prev_prev.h / prev.h;
                cells.push(CellPlan {
                    index: cells.len(),
                    stage,
                    kind,
                    width,
                    in0: prev_prev,
                    in1: prev,
                    pre0_stride,
                    out,
                });
                prev_prev = prev;
                prev = out;
            }
        }
        cells
    }
}
