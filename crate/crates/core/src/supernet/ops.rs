//! Concrete edge operations.

use crate::archspace::OpKind;
use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, Ctx};
use crate::partaware::{PartAware, PartAwareConfig};
use crate::tensor::Tensor;

/// ReLU, depthwise 3x3, pointwise 1x1, BN.
#[derive(Clone, Debug)]
pub struct SepUnit {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub bn: BatchNorm2d,
}

impl SepUnit {
    fn new(b: &mut Builder, name: &str, c: usize, stride: usize, dilation: usize) -> Self {
        let mut s = b.sub(name);
        let spec = Conv2dSpec::new(stride, dilation).dilated(dilation).grouped(c);
        SepUnit {
            depthwise: s.conv("dw", c, c, 3, spec),
            pointwise: s.conv("pw", c, c, 1, Conv2dSpec::new(1, 0)),
            bn: s.bn("bn", c),
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let x = ctx.tape.relu(x);
        let x = self.depthwise.forward(ctx, x);
        let x = self.pointwise.forward(ctx, x);
        self.bn.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub enum EdgeOp {
    Zero { stride: usize },
    Identity { stride: usize },
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    SepConv([SepUnit; 2]),
    DilConv(SepUnit),
    PartAware(Box<PartAware>),
}

impl EdgeOp {
    /// Instantiates `op` at width `c`. Parameters are created under the
    /// builder's current prefix.
    pub fn new(b: &mut Builder, op: OpKind, c: usize, stride: usize, parts: usize) -> Result<Self> {
        Ok(match op {
            OpKind::Zero => EdgeOp::Zero { stride },
            OpKind::Identity => EdgeOp::Identity { stride },
            OpKind::MaxPool3x3 => EdgeOp::MaxPool { stride },
            OpKind::AvgPool3x3 => EdgeOp::AvgPool { stride },
            OpKind::SepConv3x3 => EdgeOp::SepConv([
                SepUnit::new(b, "unit0", c, stride, 1),
                SepUnit::new(b, "unit1", c, 1, 1),
            ]),
            OpKind::DilConv3x3 => EdgeOp::DilConv(SepUnit::new(b, "unit", c, stride, 2)),
            OpKind::PartAware => {
                let cfg = PartAwareConfig::for_edge(c, stride, parts);
                EdgeOp::PartAware(Box::new(PartAware::new(b, cfg)?))
            }
        })
    }

    pub fn kind(&self) -> OpKind {
        match self {
            EdgeOp::Zero { .. } => OpKind::Zero,
            EdgeOp::Identity { .. } => OpKind::Identity,
            EdgeOp::MaxPool { .. } => OpKind::MaxPool3x3,
            EdgeOp::AvgPool { .. } => OpKind::AvgPool3x3,
            EdgeOp::SepConv(_) => OpKind::SepConv3x3,
            EdgeOp::DilConv(_) => OpKind::DilConv3x3,
            EdgeOp::PartAware(_) => OpKind::PartAware,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(match self {
            EdgeOp::Zero { stride } => {
                let s = ctx.tape.shape(x);
                let shape = [s[0], s[1], s[2] / stride, s[3] / stride];
                ctx.tape.constant(Tensor::zeros(&shape))
            }
            EdgeOp::Identity { stride: 1 } => x,
            EdgeOp::Identity { stride } => ctx.tape.subsample(x, *stride),
            EdgeOp::MaxPool { stride } => ctx.tape.max_pool3(x, *stride),
            EdgeOp::AvgPool { stride } => ctx.tape.avg_pool3(x, *stride),
            EdgeOp::SepConv([a, b]) => {
                let y = a.forward(ctx, x);
                b.forward(ctx, y)
            }
            EdgeOp::DilConv(unit) => unit.forward(ctx, x),
            EdgeOp::PartAware(pa) => pa.forward(ctx, x)?,
        })
    }
}

/// Checks that `x` is an `[N, c, H, W]` map with `H, W` divisible by `stride`.
pub(crate) fn check_edge_input(shape: &[usize], c: usize, stride: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != c || shape[2] % stride != 0 || shape[3] % stride != 0 {
        return Err(Error::invalid(format!(
            "edge of width {c} and stride {stride} cannot take input {shape:?}"
        )));
    }
    Ok(())
}
