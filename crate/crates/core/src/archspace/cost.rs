//! Static parameter and multiply-accumulate accounting.
//!
//! FLOPs are reported as MACs (one multiply-accumulate = one FLOP). Only
//! convolutions and linear layers contribute MACs; pooling, identity, zero,
//! batch norm and elementwise work count as zero. Convolutions carry no bias
//! and are followed by an affine batch norm (2 parameters per channel); linear
//! layers of the head carry a bias.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use super::genotype::Genotype;
use super::macro_config::{CellPlan, MacroConfig};
use super::ops::OpKind;
use crate::error::Result;
use crate::partaware::{part_aware_cost, PartAwareConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl Cost {
    pub const ZERO: Cost = Cost { params: 0, macs: 0 };

    pub fn new(params: u64, macs: u64) -> Self {
        Cost { params, macs }
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost {
            params: self.params + rhs.params,
            macs: self.macs + rhs.macs,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

/// Bias-free `k x k` convolution producing an `out_h x out_w` map.
pub fn conv_cost(cin: usize, cout: usize, k: usize, groups: usize, out_h: usize, out_w: usize) -> Cost {
    let params = (cin / groups * cout * k * k) as u64;
    Cost::new(params, params * (out_h * out_w) as u64)
}

pub fn bn_cost(c: usize) -> Cost {
    Cost::new(2 * c as u64, 0)
}

pub fn linear_cost(din: usize, dout: usize, bias: bool) -> Cost {
    let w = (din * dout) as u64;
    Cost::new(w + if bias { dout as u64 } else { 0 }, w)
}

/// Cost of one edge operation of width `c` applied to an `h x w` input.
pub fn op_cost(op: OpKind, c: usize, stride: usize, h: usize, w: usize, parts: usize) -> Cost {
    let (oh, ow) = (h / stride, w / stride);
    match op {
        OpKind::Zero | OpKind::Identity | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => Cost::ZERO,
        OpKind::SepConv3x3 => {
            // two stacked (depthwise 3x3, pointwise 1x1, BN) units; only the
            // first is strided
            let unit = |oh, ow| conv_cost(c, c, 3, c, oh, ow) + conv_cost(c, c, 1, 1, oh, ow) + bn_cost(c);
            unit(oh, ow) + unit(oh, ow)
        }
        OpKind::DilConv3x3 => conv_cost(c, c, 3, c, oh, ow) + conv_cost(c, c, 1, 1, oh, ow) + bn_cost(c),
        OpKind::PartAware => {
            let cfg = PartAwareConfig::for_edge(c, stride, parts);
            part_aware_cost(&cfg, h, w).expect("edge config is valid")
        }
    }
}

pub fn stem_cost(m: &MacroConfig) -> Cost {
    let s = m.stem_shape();
    conv_cost(3, s.c, 3, 1, s.h, s.w) + bn_cost(s.c)
}

/// Embedding (f -> g) and classifier (g -> h) layers.
pub fn head_cost(m: &MacroConfig) -> Cost {
    linear_cost(m.feature_dim(), m.embed_dim, true) + linear_cost(m.embed_dim, m.num_ids, true)
}

/// Input projections and output projection of a cell, excluding edges.
pub fn cell_frame_cost(cell: &CellPlan, blocks: usize) -> Cost {
    let (c, out) = (cell.width, cell.out);
    let (h1, w1) = (cell.in1.h, cell.in1.w);
    conv_cost(cell.in0.c, c, 1, 1, h1, w1)
        + bn_cost(c)
        + conv_cost(cell.in1.c, c, 1, 1, h1, w1)
        + bn_cost(c)
        + conv_cost(blocks * c, c, 1, 1, out.h, out.w)
        + bn_cost(c)
}

pub fn cell_cost(g: &Genotype, cell: &CellPlan, parts: usize) -> Cost {
    let edges: Cost = g
        .cell(cell.kind)
        .iter()
        .flat_map(|b| b.edges())
        .map(|(input, op)| {
            let (h, w) = cell.edge_input_hw(input);
            op_cost(op, cell.width, cell.edge_stride(input), h, w, parts)
        })
        .sum();
    cell_frame_cost(cell, g.blocks()) + edges
}

/// Parameters and MACs of the network assembled from `g` on skeleton `m`,
/// for one image at `m.input_hw`.
pub fn count_params_flops(g: &Genotype, m: &MacroConfig) -> Result<Cost> {
    m.validate_for_genotype(g)?;
    let cells: Cost = m.plan().iter().map(|cell| cell_cost(g, cell, m.parts)).sum();
    Ok(stem_cost(m) + cells + head_cost(m))
}

/// Reference ResNet with basic residual blocks (`[2,2,2,2]` is ResNet-18,
/// `[3,4,6,3]` ResNet-34): 7x7/2 stem, 3x3/2 max pool, four stages of width
/// 64..512, then the same f -> g -> h head as the searched networks.
pub fn reference_resnet_cost(depths: [usize; 4], input_hw: [usize; 2], num_ids: usize, embed_dim: usize) -> Cost {
    let out = |len: usize, k: usize, s: usize, p: usize| (len + 2 * p - k) / s + 1;
    let (mut h, mut w) = (out(input_hw[0], 7, 2, 3), out(input_hw[1], 7, 2, 3));
    let mut total = conv_cost(3, 64, 7, 1, h, w) + bn_cost(64);
    h = out(h, 3, 2, 1);
    w = out(w, 3, 2, 1);
    let mut cin = 64;
    for (stage, &depth) in depths.iter().enumerate() {
        let cout = 64 << stage;
        for j in 0..depth {
            let stride = if stage > 0 && j == 0 { 2 } else { 1 };
            let (oh, ow) = (out(h, 3, stride, 1), out(w, 3, stride, 1));
            total += conv_cost(cin, cout, 3, 1, oh, ow) + bn_cost(cout);
            total += conv_cost(cout, cout, 3, 1, oh, ow) + bn_cost(cout);
            if stride != 1 || cin != cout {
                total += conv_cost(cin, cout, 1, 1, oh, ow) + bn_cost(cout);
            }
            h = oh;
            w = ow;
            cin = cout;
        }
    }
    total + linear_cost(cin, embed_dim, true) + linear_cost(embed_dim, num_ids, true)
}
