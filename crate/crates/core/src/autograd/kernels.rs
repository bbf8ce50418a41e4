//! Raw NCHW kernels shared by forward and backward passes.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.padding >= span,
            "kernel span {span} exceeds padded input {input}+2*{}",
            self.padding
        );
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + offset - pad` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let (s, off, p, len) = (stride as i64, offset as i64, pad as i64, len as i64);
    let lo_num = p - off;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    let hi_num = len - 1 + p - off;
    let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
    let hi = hi.min(out_len as i64).max(0) as usize;
    (lo.min(hi as i64) as usize, hi)
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Tensor {
    let [n, cin, h, wd] = dims4(x);
    let [cout, cpg, kh, kw] = dims4(w);
    let g = spec.groups;
    assert_eq!(cin, cpg * g, "conv input channels {cin} != {cpg}*{g}");
    assert_eq!(cout % g, 0);
    let opg = cout / g;
    let oh = spec.out_len(h, kh);
    let ow = spec.out_len(wd, kw);
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    let xd = x.data();
    let wdta = w.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / opg;
            let obase = (b * cout + oc) * oh * ow;
            for icg in 0..cpg {
                let ic = grp * cpg + icg;
                let xbase = (b * cin + ic) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, s, ky * d, p);
                    for kx in 0..kw {
                        let wv = wdta[((oc * cpg + icg) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(ow, wd, s, kx * d, p);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky * d - p;
                            let orow = &mut out[obase + oy * ow..obase + (oy + 1) * ow];
                            let xrow = &xd[xbase + iy * wd..xbase + (iy + 1) * wd];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * s + kx * d - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Gradients of a convolution with respect to its input and weight. Either
/// may be skipped.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    spec: &Conv2dSpec,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [n, cin, h, wd] = dims4(x);
    let [cout, cpg, kh, kw] = dims4(w);
    let [_, _, oh, ow] = dims4(dout);
    let opg = cout / spec.groups;
    let (s, p, d) = (spec.stride, spec.padding, spec.dilation);
    let xd = x.data();
    let wdta = w.data();
    let gd = dout.data();
    let mut dx = if want_dx { vec![0.0; xd.len()] } else { Vec::new() };
    let mut dw = if want_dw { vec![0.0; wdta.len()] } else { Vec::new() };
    for b in 0..n {
        for oc in 0..cout {
            let grp = oc / opg;
            let obase = (b * cout + oc) * oh * ow;
            for icg in 0..cpg {
                let ic = grp * cpg + icg;
                let xbase = (b * cin + ic) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, s, ky * d, p);
                    for kx in 0..kw {
                        let widx = ((oc * cpg + icg) * kh + ky) * kw + kx;
                        let wv = wdta[widx];
                        let (ox0, ox1) = valid_range(ow, wd, s, kx * d, p);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky * d - p;
                            let grow = &gd[obase + oy * ow..obase + (oy + 1) * ow];
                            if want_dx {
                                let dxrow = &mut dx[xbase + iy * wd..xbase + (iy + 1) * wd];
                                for ox in ox0..ox1 {
                                    dxrow[ox * s + kx * d - p] += wv * grow[ox];
                                }
                            }
                            if want_dw {
                                let xrow = &xd[xbase + iy * wd..xbase + (iy + 1) * wd];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * s + kx * d - p];
                                }
                            }
                        }
                        if want_dw {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        want_dx.then(|| Tensor::new(x.shape().to_vec(), dx)),
        want_dw.then(|| Tensor::new(w.shape().to_vec(), dw)),
    )
}

/// 3x3 max pooling with padding 1. Returns the pooled tensor and, per output
/// element, the flat input index that produced it.
pub(crate) fn max_pool3(x: &Tensor, stride: usize) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = dims4(x);
    let spec = Conv2dSpec::new(stride, 1);
    let (oh, ow) = (spec.out_len(h, 3), spec.out_len(w, 3));
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as i64 - 1;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = xd[idx];
                        // NaN propagates: the first NaN wins and sticks.
                        if v > best || best_idx == usize::MAX || v.is_nan() && !best.is_nan() {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], out), arg)
}

/// 3x3 average pooling with padding 1, excluding padded cells from the count.
pub(crate) fn avg_pool3(x: &Tensor, stride: usize) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let spec = Conv2dSpec::new(stride, 1);
    let (oh, ow) = (spec.out_len(h, 3), spec.out_len(w, 3));
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, ye) = window(oy * stride, h);
                let (xs, xe) = window(ox * stride, w);
                let mut acc = 0.0;
                for iy in ys..ye {
                    for ix in xs..xe {
                        acc += xd[base + iy * w + ix];
                    }
                }
                out.push(acc / ((ye - ys) * (xe - xs)) as f64);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn avg_pool3_backward(x_shape: &[usize], dout: &Tensor, stride: usize) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let [_, _, oh, ow] = dims4(dout);
    let gd = dout.data();
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, ye) = window(oy * stride, h);
                let (xs, xe) = window(ox * stride, w);
                let g = gd[(plane * oh + oy) * ow + ox] / ((ye - ys) * (xe - xs)) as f64;
                for iy in ys..ye {
                    for ix in xs..xe {
                        dx[base + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Clipped 3-wide window centred at `center` (already offset by the pad).
#[inline]
fn window(center: usize, len: usize) -> (usize, usize) {
    let start = center.saturating_sub(1);
    let end = (center + 2).min(len);
    (start, end)
}

pub(crate) fn subsample(x: &Tensor, stride: usize) -> Tensor {
    let [n, c, h, w] = dims4(x);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(xd[plane * h * w + oy * stride * w + ox * stride]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn subsample_backward(x_shape: &[usize], dout: &Tensor, stride: usize) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let [_, _, oh, ow] = dims4(dout);
    let gd = dout.data();
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[plane * h * w + oy * stride * w + ox * stride] = gd[(plane * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    assert_eq!(perm.len(), shape.len());
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(xd[offset]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
pub(crate) fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
    assert_eq!(b.dim(0), bs);
    assert_eq!(b.dim(1), k, "bmm inner dims {:?} x {:?}", a.shape(), b.shape());
    let n = b.dim(2);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; bs * m * n];
    for batch in 0..bs {
        for i in 0..m {
            let orow = &mut out[(batch * m + i) * n..(batch * m + i + 1) * n];
            for p in 0..k {
                let av = ad[(batch * m + i) * k + p];
                let brow = &bd[(batch * k + p) * n..(batch * k + p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    Tensor::new(vec![bs, m, n], out)
}

/// `x [N,din] * w[dout,din]^T (+ b)`.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = w.dim(0);
    assert_eq!(w.dim(1), din, "linear: input width {din} vs weight {:?}", w.shape());
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * dout);
    for i in 0..n {
        let xrow = &xd[i * din..(i + 1) * din];
        for o in 0..dout {
            let wrow = &wd[o * din..(o + 1) * din];
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for (a, c) in xrow.iter().zip(wrow) {
                acc += a * c;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![n, dout], out)
}
