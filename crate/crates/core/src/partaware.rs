//! The part-aware operation: split a feature map into horizontal body-part
//! bands, pool each band to a vector, let the part vectors attend to each
//! other, paint the attended vectors back over their bands and fuse the
//! result with the input through a 1x1 convolution.

use crate::archspace::Cost;
use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartAwareConfig {
    /// Number of horizontal bands.
    pub parts: usize,
    /// Width of the body vectors.
    pub d: usize,
    pub heads: usize,
    pub cin: usize,
    pub cout: usize,
    /// 1 or 2; applied by the fusion convolution.
    pub stride: usize,
}

impl PartAwareConfig {
    /// Configuration used on a cell edge of width `c`: `d = c`, one head.
    pub fn for_edge(c: usize, stride: usize, parts: usize) -> Self {
        PartAwareConfig {
            parts,
            d: c,
            heads: 1,
            cin: c,
            cout: c,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts == 0 {
            return Err(Error::invalid("part count must be at least 1"));
        }
        if self.d == 0 {
            return Err(Error::invalid("body-vector width d must be at least 1"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} heads do not divide d = {}",
                self.heads, self.d
            )));
        }
        if self.cin == 0 || self.cout == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::invalid(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || h % self.parts != 0 {
            return Err(Error::invalid(format!(
                "height {h} is not divisible into {} parts",
                self.parts
            )));
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} not divisible by stride {}",
                self.stride
            )));
        }
        Ok(())
    }
}

/// Parameters of one part-aware operation. All linear maps are bias-free;
/// the part projection is shared by every band.
#[derive(Clone, Debug)]
pub struct PartAwareParams {
    pub proj: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub fusion: Conv2d,
}

impl PartAwareParams {
    pub fn new(b: &mut Builder, cfg: &PartAwareConfig) -> Result<Self> {
        cfg.validate()?;
        let lin = |b: &mut Builder, name: &str, din: usize, dout: usize| {
            b.linear(name, din, dout, false, (1.0 / din as f64).sqrt())
        };
        Ok(PartAwareParams {
            proj: lin(b, "proj", cfg.cin, cfg.d),
            query: lin(b, "query", cfg.d, cfg.d),
            key: lin(b, "key", cfg.d, cfg.d),
            value: lin(b, "value", cfg.d, cfg.d),
            out: lin(b, "out", cfg.d, cfg.d),
            fusion: b.conv("fusion", cfg.cin + cfg.d, cfg.cout, 1, Conv2dSpec::new(cfg.stride, 0)),
        })
    }
}

#[derive(Clone, Debug)]
pub struct PartAware {
    pub cfg: PartAwareConfig,
    pub params: PartAwareParams,
}

impl PartAware {
    pub fn new(b: &mut Builder, cfg: PartAwareConfig) -> Result<Self> {
        Ok(PartAware {
            params: PartAwareParams::new(b, &cfg)?,
            cfg,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.forward_masked(ctx, x, None)
    }

    /// Forward pass with an optional additive `[M, M]` mask on the attention
    /// logits (use `-inf` to forbid a pair).
    pub fn forward_masked(&self, ctx: &mut Ctx, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let cfg = &self.cfg;
        let p = &self.params;
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != cfg.cin {
            return Err(Error::invalid(format!(
                "part-aware input {shape:?} does not have {} channels",
                cfg.cin
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        cfg.check_input(h, w)?;
        let (m, d, heads) = (cfg.parts, cfg.d, cfg.heads);
        let dh = d / heads;

        let pooled = ctx.tape.band_pool(x, m);
        let pooled = ctx.tape.reshape(pooled, &[n * m, cfg.cin]);
        let body = p.proj.forward(ctx, pooled);

        let split = |ctx: &mut Ctx, v: Var| {
            let v = ctx.tape.reshape(v, &[n, m, heads, dh]);
            let v = ctx.tape.permute(v, &[0, 2, 1, 3]);
            ctx.tape.reshape(v, &[n * heads, m, dh])
        };
        let q = p.query.forward(ctx, body);
        let k = p.key.forward(ctx, body);
        let v = p.value.forward(ctx, body);
        let (q, k, v) = (split(ctx, q), split(ctx, k), split(ctx, v));
        let kt = ctx.tape.permute(k, &[0, 2, 1]);
        let scores = ctx.tape.bmm(q, kt);
        let mut scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mask) = mask {
            if mask.shape() != [m, m] {
                return Err(Error::invalid(format!("attention mask must be [{m}, {m}]")));
            }
            scores = ctx.tape.add_const(scores, mask.clone());
        }
        let attn = ctx.tape.softmax_last(scores);
        let mixed = ctx.tape.bmm(attn, v);
        let mixed = ctx.tape.reshape(mixed, &[n, heads, m, dh]);
        let mixed = ctx.tape.permute(mixed, &[0, 2, 1, 3]);
        let mixed = ctx.tape.reshape(mixed, &[n * m, d]);
        let attended = p.out.forward(ctx, mixed);
        let body = ctx.tape.add(body, attended);

        let body = ctx.tape.reshape(body, &[n, m, d]);
        let enhanced = ctx.tape.band_broadcast(body, h, w);
        let fused = ctx.tape.concat_channels(&[x, enhanced]);
        Ok(p.fusion.forward(ctx, fused))
    }
}

/// Evaluates the module on a tensor outside of any training loop.
pub fn part_aware_forward(x: &Tensor, module: &PartAware, store: &ParamStore) -> Result<Tensor> {
    let mut ctx = Ctx::eval(store);
    let xv = ctx.input(x.clone());
    let y = module.forward(&mut ctx, xv)?;
    Ok(ctx.value(y).clone())
}

/// Parameters and MACs of one application to an `h x w` input.
pub fn part_aware_cost(cfg: &PartAwareConfig, h: usize, w: usize) -> Result<Cost> {
    cfg.validate()?;
    let (m, d, cin, cout) = (cfg.parts as u64, cfg.d as u64, cfg.cin as u64, cfg.cout as u64);
    let params = cin * d + 3 * d * d + d * d + (cin + d) * cout;
    let (oh, ow) = ((h / cfg.stride) as u64, (w / cfg.stride) as u64);
    let macs = m * cin * d          // shared part projection
        + 3 * m * d * d             // query, key, value
        + 2 * m * m * d             // scores and weighted sum
        + m * d * d                 // output projection
        + (cin + d) * cout * oh * ow; // 1x1 fusion
    Ok(Cost::new(params, macs))
}

/// Reorders the horizontal bands of an `[N, C, H, W]` tensor: band `m` of the
/// result is band `perm[m]` of `x`.
pub fn permute_bands(x: &Tensor, parts: usize, perm: &[usize]) -> Tensor {
    assert_eq!(x.rank(), 4);
    assert_eq!(perm.len(), parts);
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert_eq!(h % parts, 0);
    let band = h / parts * w;
    let mut out = Tensor::zeros(x.shape());
    for plane in 0..n * c {
        for (m, &src) in perm.iter().enumerate() {
            let dst = plane * h * w + m * band;
            let from = plane * h * w + src * band;
            out.data_mut()[dst..dst + band].copy_from_slice(&x.data()[from..from + band]);
        }
    }
    out
}
