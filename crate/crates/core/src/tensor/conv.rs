//! Grouped 2-D convolution in NCHW layout.
//!
//! Two forward paths are provided. [`conv2d_direct`] is a plain loop nest;
//! [`conv2d`] unrolls patches (im2col) and multiplies per group, and skips the
//! unroll entirely for stride-1 unpadded 1x1 kernels, where the input planes
//! already are the column matrix.

use super::{lanes::dot, ConvWeights, Scalar, Shape4, Tensor};
use crate::error::{check_dim, check_divisible, Error, Result};
use crate::parallel;

/// Validated convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Shape4,
    pub out_channels: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new<S: Scalar>(input: Shape4, w: &ConvWeights<S>, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be >= 1"));
        }
        check_divisible(OP, "out_channels", w.out_channels(), w.groups)?;
        check_divisible(OP, "input channels", input.c, w.groups)?;
        check_dim(OP, "input channels", w.in_channels(), input.c)?;
        let (kh, kw) = w.kernel();
        if input.h + 2 * pad < kh {
            return Err(Error::Shape {
                op: OP,
                dim: "padded height",
                expected: kh,
                got: input.h + 2 * pad,
            });
        }
        if input.w + 2 * pad < kw {
            return Err(Error::Shape {
                op: OP,
                dim: "padded width",
                expected: kw,
                got: input.w + 2 * pad,
            });
        }
        if let Some(b) = &w.bias {
            check_dim(OP, "bias length", w.out_channels(), b.len())?;
        }
        Ok(Self {
            input,
            out_channels: w.out_channels(),
            groups: w.groups,
            kh,
            kw,
            stride,
            pad,
            out_h: (input.h + 2 * pad - kh) / stride + 1,
            out_w: (input.w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output(&self) -> Shape4 {
        Shape4::new(self.input.n, self.out_channels, self.out_h, self.out_w)
    }

    fn in_per_group(&self) -> usize {
        self.input.c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the per-group column matrix.
    fn col_rows(&self) -> usize {
        self.in_per_group() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> usize {
        self.input.n * self.out_channels * self.col_rows() * self.out_h * self.out_w
    }
}

/// Convolution via im2col + matrix multiply.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, w: &ConvWeights<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let g = ConvGeom::new(x.shape(), w, stride, pad)?;
    let out_shape = g.output();
    let mut out = Tensor::zeros(out_shape);
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let k = g.col_rows();
    let p = g.out_h * g.out_w;
    let plane = g.input.plane();
    let wdata = w.weight.data();
    parallel::for_each_chunk(out.data_mut(), out_shape.sample(), |n, y| {
        let xs = x.sample(n);
        let mut col = Vec::new();
        for grp in 0..g.groups {
            let xg = &xs[grp * cg * plane..(grp + 1) * cg * plane];
            let colm: &[S] = if g.is_pointwise() {
                xg
            } else {
                col.resize(k * p, S::zero());
                im2col(xg, cg, &g, &mut col);
                &col
            };
            let wg = &wdata[grp * og * k..(grp + 1) * og * k];
            let yg = &mut y[grp * og * p..(grp + 1) * og * p];
            gemm_acc(og, k, p, wg, colm, yg);
        }
        if let Some(b) = &w.bias {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    Ok(out)
}

/// Direct loop-nest convolution; the reference path for [`conv2d`].
pub fn conv2d_direct<S: Scalar>(x: &Tensor<S>, w: &ConvWeights<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    let g = ConvGeom::new(x.shape(), w, stride, pad)?;
    let out_shape = g.output();
    let mut out = Tensor::zeros(out_shape);
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let (ih, iw) = (g.input.h as isize, g.input.w as isize);
    parallel::for_each_chunk(out.data_mut(), out_shape.sample(), |n, y| {
        for o in 0..g.out_channels {
            let grp = o / og;
            let bias = w.bias.as_ref().map_or(S::zero(), |b| b[o]);
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias;
                    for ci in 0..cg {
                        let c = grp * cg + ci;
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= iw {
                                    continue;
                                }
                                acc += x.at(n, c, iy as usize, ix as usize) * w.weight.at(o, ci, ky, kx);
                            }
                        }
                    }
                    y[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d`].
pub struct ConvGrads<S> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub dbias: Option<Vec<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &ConvWeights<S>,
    stride: usize,
    pad: usize,
    dy: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    let g = ConvGeom::new(x.shape(), w, stride, pad)?;
    super::check_same_shape("conv2d backward", g.output(), dy.shape())?;
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let k = g.col_rows();
    let p = g.out_h * g.out_w;
    let plane = g.input.plane();
    let wdata = w.weight.data();
    let wlen = w.weight.len();

    let mut dx = Tensor::zeros(g.input);
    let mut dw_parts = vec![S::zero(); g.input.n * wlen];
    parallel::for_each_chunk2(dx.data_mut(), g.input.sample(), &mut dw_parts, wlen, |n, dxs, dws| {
        let xs = x.sample(n);
        let dys = dy.sample(n);
        let mut col = Vec::new();
        let mut dcol = vec![S::zero(); k * p];
        for grp in 0..g.groups {
            let xg = &xs[grp * cg * plane..(grp + 1) * cg * plane];
            let colm: &[S] = if g.is_pointwise() {
                xg
            } else {
                col.resize(k * p, S::zero());
                im2col(xg, cg, &g, &mut col);
                &col
            };
            let dyg = &dys[grp * og * p..(grp + 1) * og * p];
            let wg = &wdata[grp * og * k..(grp + 1) * og * k];
            gemm_abt_acc(og, p, k, dyg, colm, &mut dws[grp * og * k..(grp + 1) * og * k]);
            let dxg = &mut dxs[grp * cg * plane..(grp + 1) * cg * plane];
            if g.is_pointwise() {
                gemm_atb_acc(og, k, p, wg, dyg, dxg);
            } else {
                dcol.iter_mut().for_each(|v| *v = S::zero());
                gemm_atb_acc(og, k, p, wg, dyg, &mut dcol);
                col2im_acc(&dcol, cg, &g, dxg);
            }
        }
    });
    let mut dw = Tensor::zeros(w.weight.shape());
    for part in dw_parts.chunks(wlen) {
        for (a, &b) in dw.data_mut().iter_mut().zip(part) {
            *a += b;
        }
    }
    let dbias = w.bias.as_ref().map(|_| {
        let mut db = vec![S::zero(); g.out_channels];
        for n in 0..g.input.n {
            for (o, dbo) in db.iter_mut().enumerate() {
                *dbo += dy.plane(n, o).iter().copied().sum::<S>();
            }
        }
        db
    });
    Ok(ConvGrads { dx, dw, dbias })
}

fn check_depthwise<S: Scalar>(x: Shape4, w: &ConvWeights<S>) -> Result<()> {
    const OP: &str = "depthwise_conv3x3";
    check_dim(OP, "groups", x.c, w.groups)?;
    check_dim(OP, "in_channels_per_group", 1, w.in_per_group())?;
    check_dim(OP, "out_channels", x.c, w.out_channels())?;
    check_dim(OP, "kernel height", 3, w.kernel().0)?;
    check_dim(OP, "kernel width", 3, w.kernel().1)
}

/// Per-channel 3x3 spatial filtering (`groups == channels`).
pub fn depthwise_conv3x3<S: Scalar>(x: &Tensor<S>, w: &ConvWeights<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
    check_depthwise(x.shape(), w)?;
    let g = ConvGeom::new(x.shape(), w, stride, pad)?;
    let out_shape = g.output();
    let mut out = Tensor::zeros(out_shape);
    let p = g.out_h * g.out_w;
    let (ih, iw) = (g.input.h, g.input.w);
    let wd = w.weight.data();
    parallel::for_each_chunk(out.data_mut(), out_shape.sample(), |n, y| {
        for c in 0..g.input.c {
            let src = x.plane(n, c);
            let k = &wd[c * 9..c * 9 + 9];
            let yc = &mut y[c * p..(c + 1) * p];
            let bias = w.bias.as_ref().map_or(S::zero(), |b| b[c]);
            if stride == 1 {
                yc.iter_mut().for_each(|v| *v = bias);
                for (oy, yrow) in yc.chunks_mut(g.out_w).enumerate() {
                    for ky in 0..3 {
                        let iy = (oy + ky).wrapping_sub(pad);
                        if iy >= ih {
                            continue;
                        }
                        let row = &src[iy * iw..(iy + 1) * iw];
                        for kx in 0..3 {
                            let (lo, hi) = unit_stride_span(kx, pad, iw, g.out_w);
                            if lo >= hi {
                                continue;
                            }
                            let kv = k[ky * 3 + kx];
                            let srow = &row[lo + kx - pad..hi + kx - pad];
                            for (o, &v) in yrow[lo..hi].iter_mut().zip(srow) {
                                *o += kv * v;
                            }
                        }
                    }
                }
                continue;
            }
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky).wrapping_sub(pad);
                        if iy >= ih {
                            continue;
                        }
                        let row = &src[iy * iw..(iy + 1) * iw];
                        for kx in 0..3 {
                            let ix = (ox * stride + kx).wrapping_sub(pad);
                            if ix < iw {
                                acc += row[ix] * k[ky * 3 + kx];
                            }
                        }
                    }
                    yc[oy * g.out_w + ox] = acc;
                }
            }
        }
    });
    Ok(out)
}

pub fn depthwise_conv3x3_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &ConvWeights<S>,
    stride: usize,
    pad: usize,
    dy: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    check_depthwise(x.shape(), w)?;
    let g = ConvGeom::new(x.shape(), w, stride, pad)?;
    super::check_same_shape("depthwise backward", g.output(), dy.shape())?;
    let (ih, iw) = (g.input.h, g.input.w);
    let wd = w.weight.data();
    let wlen = w.weight.len();
    let mut dx = Tensor::zeros(g.input);
    let mut dw_parts = vec![S::zero(); g.input.n * wlen];
    parallel::for_each_chunk2(dx.data_mut(), g.input.sample(), &mut dw_parts, wlen, |n, dxs, dws| {
        for c in 0..g.input.c {
            let src = x.plane(n, c);
            let dyc = dy.plane(n, c);
            let k = &wd[c * 9..c * 9 + 9];
            let dk = &mut dws[c * 9..c * 9 + 9];
            let dxc = &mut dxs[c * ih * iw..(c + 1) * ih * iw];
            if stride == 1 {
                for (oy, dyrow) in dyc.chunks(g.out_w).enumerate() {
                    for ky in 0..3 {
                        let iy = (oy + ky).wrapping_sub(pad);
                        if iy >= ih {
                            continue;
                        }
                        for kx in 0..3 {
                            let (lo, hi) = unit_stride_span(kx, pad, iw, g.out_w);
                            if lo >= hi {
                                continue;
                            }
                            let (a, b) = (iy * iw + lo + kx - pad, iy * iw + hi + kx - pad);
                            let d = &dyrow[lo..hi];
                            dk[ky * 3 + kx] += dot(d, &src[a..b]);
                            let kv = k[ky * 3 + kx];
                            for (o, &v) in dxc[a..b].iter_mut().zip(d) {
                                *o += kv * v;
                            }
                        }
                    }
                }
                continue;
            }
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let d = dyc[oy * g.out_w + ox];
                    for ky in 0..3 {
                        let iy = (oy * stride + ky).wrapping_sub(pad);
                        if iy >= ih {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx).wrapping_sub(pad);
                            if ix < iw {
                                dk[ky * 3 + kx] += d * src[iy * iw + ix];
                                dxc[iy * iw + ix] += d * k[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    let mut dw = Tensor::zeros(w.weight.shape());
    for part in dw_parts.chunks(wlen) {
        for (a, &b) in dw.data_mut().iter_mut().zip(part) {
            *a += b;
        }
    }
    let dbias = w.bias.as_ref().map(|_| {
        (0..g.input.c)
            .map(|c| (0..g.input.n).map(|n| dy.plane(n, c).iter().copied().sum::<S>()).sum())
            .collect()
    });
    Ok(ConvGrads { dx, dw, dbias })
}

/// Output columns `lo..hi` whose input column `ox + kx - pad` lies inside
/// `0..iw` for a stride-1 kernel tap.
fn unit_stride_span(kx: usize, pad: usize, iw: usize, out_w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (iw + pad).saturating_sub(kx).min(out_w);
    (lo, hi)
}

/// Unroll one group of one sample into a `(cg*kh*kw, out_h*out_w)` matrix.
fn im2col<S: Scalar>(xg: &[S], cg: usize, g: &ConvGeom, col: &mut [S]) {
    let (ih, iw) = (g.input.h, g.input.w);
    let p = g.out_h * g.out_w;
    for c in 0..cg {
        let src = &xg[c * ih * iw..(c + 1) * ih * iw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad);
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy >= ih {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx).wrapping_sub(g.pad);
                        *d = if ix < iw { src[iy * iw + ix] } else { S::zero() };
                    }
                }
            }
        }
    }
}

fn col2im_acc<S: Scalar>(col: &[S], cg: usize, g: &ConvGeom, dxg: &mut [S]) {
    let (ih, iw) = (g.input.h, g.input.w);
    let p = g.out_h * g.out_w;
    for c in 0..cg {
        let dst = &mut dxg[c * ih * iw..(c + 1) * ih * iw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad);
                    if iy >= ih {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx).wrapping_sub(g.pad);
                        if ix < iw {
                            dst[iy * iw + ix] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`.
pub(crate) fn gemm_abt_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`.
pub(crate) fn gemm_atb_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}
