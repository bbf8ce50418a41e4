use rand::Rng;
use serde::{Deserialize, Serialize};

use super::genotype::{BlockSpec, Genotype};
use super::ops::{CellType, OpKind, SearchSpace};
use crate::autograd::softmax;
use crate::error::{Error, Result};

/// Architecture logits: for each cell type, block `i`, and candidate input
/// `j < 2 + i`, one logit per operation of the search space (in ordinal
/// order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub space: SearchSpace,
    pub normal: Vec<Vec<Vec<f64>>>,
    pub reduction: Vec<Vec<Vec<f64>>>,
}

impl AlphaParams {
    /// Uniform mixture on every edge.
    pub fn zeros(space: SearchSpace, blocks: usize) -> Self {
        let cell = || {
            (0..blocks)
                .map(|i| vec![vec![0.0; space.len()]; 2 + i])
                .collect::<Vec<_>>()
        };
        AlphaParams {
            space,
            normal: cell(),
            reduction: cell(),
        }
    }

    /// Independent uniform logits in `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(space: SearchSpace, blocks: usize, scale: f64, rng: &mut R) -> Self {
        let mut a = Self::zeros(space, blocks);
        for kind in [CellType::Normal, CellType::Reduction] {
            for edge in a.cell_mut(kind).iter_mut().flatten() {
                for v in edge.iter_mut() {
                    *v = rng.random_range(-scale..scale);
                }
            }
        }
        a
    }

    pub fn blocks(&self) -> usize {
        self.normal.len()
    }

    pub fn cell(&self, kind: CellType) -> &[Vec<Vec<f64>>] {
        match kind {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
        }
    }

    pub fn cell_mut(&mut self, kind: CellType) -> &mut Vec<Vec<Vec<f64>>> {
        match kind {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduction,
        }
    }

    pub fn edge(&self, kind: CellType, block: usize, input: usize) -> &[f64] {
        &self.cell(kind)[block][input]
    }

    /// Shape and finiteness check.
    pub fn validate(&self) -> Result<()> {
        if self.normal.is_empty() || self.normal.len() != self.reduction.len() {
            return Err(Error::invalid("alpha must have the same non-zero block count per cell"));
        }
        for kind in [CellType::Normal, CellType::Reduction] {
            for (i, block) in self.cell(kind).iter().enumerate() {
                if block.len() != 2 + i {
                    return Err(Error::invalid(format!(
                        "{} block {i} has {} candidate inputs, expected {}",
                        kind.name(),
                        block.len(),
                        2 + i
                    )));
                }
                for (j, edge) in block.iter().enumerate() {
                    if edge.len() != self.space.len() {
                        return Err(Error::invalid(format!(
                            "{} block {i} input {j}: {} logits for {} operations",
                            kind.name(),
                            edge.len(),
                            self.space.len()
                        )));
                    }
                    if let Some(v) = edge.iter().find(|v| !v.is_finite()) {
                        return Err(Error::invalid(format!(
                            "{} block {i} input {j}: non-finite logit {v}",
                            kind.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Flattened logits in (normal, reduction) x block x input x op order.
    pub fn flatten(&self) -> Vec<f64> {
        self.normal
            .iter()
            .chain(&self.reduction)
            .flatten()
            .flatten()
            .copied()
            .collect()
    }
}

/// Best non-ZERO operation on an edge and its softmax weight. Ties go to the
/// lower ordinal.
fn best_op(space: SearchSpace, logits: &[f64]) -> (OpKind, f64) {
    let weights = softmax(logits);
    let mut best: Option<(OpKind, f64)> = None;
    for (&op, &w) in space.ops().iter().zip(&weights) {
        if op == OpKind::Zero {
            continue;
        }
        match best {
            Some((_, bw)) if w <= bw => {}
            _ => best = Some((op, w)),
        }
    }
    best.expect("search space has a non-zero operation")
}

fn derive_cell(space: SearchSpace, cell: &[Vec<Vec<f64>>]) -> Vec<BlockSpec> {
    cell.iter()
        .map(|block| {
            let mut ranked: Vec<(usize, OpKind, f64)> = block
                .iter()
                .enumerate()
                .map(|(j, logits)| {
                    let (op, strength) = best_op(space, logits);
                    (j, op, strength)
                })
                .collect();
            // Stable sort keeps lower input indices first among equals.
            ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
            BlockSpec::new(ranked[0].0, ranked[1].0, ranked[0].1, ranked[1].1)
        })
        .collect()
}

/// Discretises `alpha`: per block, the two candidate inputs with the highest
/// strength (largest non-ZERO softmax weight) are kept, each with its
/// highest-weighted non-ZERO operation.
pub fn derive_genotype(alpha: &AlphaParams) -> Result<Genotype> {
    alpha.validate()?;
    Ok(Genotype {
        space: alpha.space,
        normal: derive_cell(alpha.space, &alpha.normal),
        reduction: derive_cell(alpha.space, &alpha.reduction),
    })
}
