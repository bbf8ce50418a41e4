use crate::archspace::{BlockSpec, CellPlan, OpKind, SearchSpace};
use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, Ctx, ParamId, ReluConvBn};

use super::ops::{check_edge_input, EdgeOp};

/// One candidate operation per entry of the search space, all reading the
/// same input and producing the same output shape.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub space: SearchSpace,
    pub width: usize,
    pub stride: usize,
    /// Aligned with `space.ops()`.
    pub ops: Vec<EdgeOp>,
}

impl MixedEdge {
    pub fn new(b: &mut Builder, space: SearchSpace, c: usize, stride: usize, parts: usize) -> Result<Self> {
        let ops = space
            .ops()
            .iter()
            .map(|&op| EdgeOp::new(&mut b.sub(op.name()), op, c, stride, parts))
            .collect::<Result<_>>()?;
        Ok(MixedEdge {
            space,
            width: c,
            stride,
            ops,
        })
    }
}

/// `sum_o softmax(alpha)[o] * o(x)`. The zero operation contributes nothing
/// and is skipped.
pub fn mixed_edge_forward(ctx: &mut Ctx, x: Var, edge: &MixedEdge, alpha: Var) -> Result<Var> {
    check_edge_input(ctx.tape.shape(x), edge.width, edge.stride)?;
    if ctx.tape.shape(alpha) != [edge.ops.len()] {
        return Err(Error::invalid(format!(
            "edge has {} operations but alpha has shape {:?}",
            edge.ops.len(),
            ctx.tape.shape(alpha)
        )));
    }
    let weights = ctx.tape.softmax_last(alpha);
    let mut total: Option<Var> = None;
    for (k, op) in edge.ops.iter().enumerate() {
        if op.kind() == OpKind::Zero {
            continue;
        }
        let y = op.forward(ctx, x)?;
        let y = ctx.tape.weighted(y, weights, k);
        total = Some(match total {
            Some(t) => ctx.tape.add(t, y),
            None => y,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => EdgeOp::Zero { stride: edge.stride }.forward(ctx, x)?,
    })
}

#[derive(Clone, Debug)]
pub enum CellEdges {
    /// `[block][input]` mixed edges with their α logits.
    Mixed(Vec<Vec<(MixedEdge, ParamId)>>),
    /// Two `(input, op)` edges per block.
    Fixed(Vec<[(usize, EdgeOp); 2]>),
}

/// Intermediate values of one cell pass.
#[derive(Clone, Debug)]
pub struct CellTrace {
    /// Projected inputs followed by each block output.
    pub states: Vec<Var>,
    /// Concatenated block outputs before the output projection.
    pub concat: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub plan: CellPlan,
    pub pre0: ReluConvBn,
    pub pre1: ReluConvBn,
    pub edges: CellEdges,
    pub post: Conv2d,
    pub post_bn: BatchNorm2d,
}

fn edge_name(block: usize, input: usize) -> String {
    format!("b{block}.in{input}")
}

impl Cell {
    fn frame(b: &mut Builder, plan: &CellPlan, blocks: usize, edges: CellEdges) -> Self {
        let c = plan.width;
        Cell {
            pre0: ReluConvBn::new(b, "pre0", plan.in0.c, c, 1, Conv2dSpec::new(plan.pre0_stride, 0)),
            pre1: ReluConvBn::new(b, "pre1", plan.in1.c, c, 1, Conv2dSpec::new(1, 0)),
            post: b.conv("post", blocks * c, c, 1, Conv2dSpec::new(1, 0)),
            post_bn: b.bn("post_bn", c),
            edges,
            plan: plan.clone(),
        }
    }

    /// Relaxed cell: every block reads every earlier state through a mixed
    /// edge. `alpha[i][j]` is the logit tensor of block `i`, input `j`.
    pub fn mixed(
        b: &mut Builder,
        plan: &CellPlan,
        space: SearchSpace,
        alpha: &[Vec<ParamId>],
        parts: usize,
    ) -> Result<Self> {
        let mut edges = Vec::with_capacity(alpha.len());
        for (i, ids) in alpha.iter().enumerate() {
            let mut row = Vec::with_capacity(ids.len());
            for (j, &id) in ids.iter().enumerate() {
                let edge = MixedEdge::new(&mut b.sub(&edge_name(i, j)), space, plan.width, plan.edge_stride(j), parts)?;
                row.push((edge, id));
            }
            edges.push(row);
        }
        Ok(Self::frame(b, plan, alpha.len(), CellEdges::Mixed(edges)))
    }

    /// Discrete cell following `blocks`. A block using the same operation
    /// twice on the same input gets a second instance suffixed `.dup`.
    pub fn fixed(b: &mut Builder, plan: &CellPlan, blocks: &[BlockSpec], parts: usize) -> Result<Self> {
        let mut edges = Vec::with_capacity(blocks.len());
        for (i, spec) in blocks.iter().enumerate() {
            let [(j1, o1), (j2, o2)] = spec.edges();
            let mut make = |j: usize, op: OpKind, dup: bool| {
                let mut name = format!("{}.{}", edge_name(i, j), op.name());
                if dup {
                    name.push_str(".dup");
                }
                EdgeOp::new(&mut b.sub(&name), op, plan.width, plan.edge_stride(j), parts).map(|e| (j, e))
            };
            let first = make(j1, o1, false)?;
            let second = make(j2, o2, (j1, o1) == (j2, o2))?;
            edges.push([first, second]);
        }
        Ok(Self::frame(b, plan, blocks.len(), CellEdges::Fixed(edges)))
    }

    pub fn blocks(&self) -> usize {
        match &self.edges {
            CellEdges::Mixed(e) => e.len(),
            CellEdges::Fixed(e) => e.len(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, s0: Var, s1: Var) -> Result<Var> {
        Ok(self.trace(ctx, s0, s1)?.out)
    }

    pub fn trace(&self, ctx: &mut Ctx, s0: Var, s1: Var) -> Result<CellTrace> {
        let p = &self.plan;
        for (x, want) in [(s0, p.in0), (s1, p.in1)] {
            let shape = ctx.tape.shape(x);
            if shape.len() != 4 || shape[1..] != [want.c, want.h, want.w] {
                return Err(Error::invalid(format!(
                    "cell {} expects inputs of shape [N, {}, {}, {}], got {shape:?}",
                    p.index, want.c, want.h, want.w
                )));
            }
        }
        let mut states = vec![self.pre0.forward(ctx, s0), self.pre1.forward(ctx, s1)];
        match &self.edges {
            CellEdges::Mixed(blocks) => {
                for row in blocks {
                    let mut acc: Option<Var> = None;
                    for (j, (edge, alpha)) in row.iter().enumerate() {
                        let a = ctx.param(*alpha);
                        let y = mixed_edge_forward(ctx, states[j], edge, a)?;
                        acc = Some(match acc {
                            Some(t) => ctx.tape.add(t, y),
                            None => y,
                        });
                    }
                    states.push(acc.expect("block has at least two inputs"));
                }
            }
            CellEdges::Fixed(blocks) => {
                for [(j1, op1), (j2, op2)] in blocks {
                    let a = op1.forward(ctx, states[*j1])?;
                    let b = op2.forward(ctx, states[*j2])?;
                    states.push(ctx.tape.add(a, b));
                }
            }
        }
        let concat = ctx.tape.concat_channels(&states[2..]);
        let y = self.post.forward(ctx, concat);
        let out = self.post_bn.forward(ctx, y);
        Ok(CellTrace { states, concat, out })
    }
}

