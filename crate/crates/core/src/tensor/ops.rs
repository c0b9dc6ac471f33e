//! Non-convolution kernels, each with its backward.

use super::lanes;
use super::{check_same_shape, Scalar, Shape4, Tensor};
use crate::error::{check_dim, check_divisible, Error, Result};
use crate::parallel;

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the old running statistic kept on every update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Source channel of output channel `k` under a `groups`-way shuffle.
///
/// Equivalent to viewing channels as `(groups, c / groups)`, transposing and
/// flattening.
#[inline]
pub fn shuffle_source(k: usize, channels: usize, groups: usize) -> usize {
    (k % groups) * (channels / groups) + k / groups
}

pub fn channel_shuffle<S: Scalar>(x: &Tensor<S>, groups: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if groups == 0 {
        return Err(Error::invalid("channel_shuffle", "groups must be >= 1"));
    }
    check_divisible("channel_shuffle", "channels", s.c, groups)?;
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    parallel::for_each_chunk(out.data_mut(), s.sample(), |n, y| {
        for k in 0..s.c {
            let src = x.plane(n, shuffle_source(k, s.c, groups));
            y[k * plane..(k + 1) * plane].copy_from_slice(src);
        }
    });
    Ok(out)
}

/// The inverse permutation is the shuffle with `c / groups` groups.
pub fn channel_shuffle_backward<S: Scalar>(dy: &Tensor<S>, groups: usize) -> Result<Tensor<S>> {
    check_divisible("channel_shuffle backward", "channels", dy.shape().c, groups)?;
    channel_shuffle(dy, dy.shape().c / groups)
}

pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    const OP: &str = "concat_channels";
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid(OP, "no parts given"))?
        .shape();
    for p in parts {
        let s = p.shape();
        check_dim(OP, "batch", first.n, s.n)?;
        check_dim(OP, "height", first.h, s.h)?;
        check_dim(OP, "width", first.w, s.w)?;
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = Shape4::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..shape.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor::new(shape, data)
}

/// Channel range `[start, start + len)` as a new tensor.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::invalid(
            "slice_channels",
            format!("range {start}..{} outside {} channels", start + len, s.c),
        ));
    }
    let plane = s.plane();
    let shape = Shape4::new(s.n, len, s.h, s.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..s.n {
        let sample = x.sample(n);
        data.extend_from_slice(&sample[start * plane..(start + len) * plane]);
    }
    Tensor::new(shape, data)
}

pub fn split_channels<S: Scalar>(x: &Tensor<S>, sizes: &[usize]) -> Result<Vec<Tensor<S>>> {
    let total: usize = sizes.iter().sum();
    check_dim("split_channels", "channel sum", x.shape().c, total)?;
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = slice_channels(x, start, len);
            start += len;
            t
        })
        .collect()
}

/// Backward of [`slice_channels`]: scatter `dy` into a zero tensor of `input` shape.
pub fn slice_channels_backward<S: Scalar>(dy: &Tensor<S>, input: Shape4, start: usize) -> Result<Tensor<S>> {
    let s = dy.shape();
    check_dim("slice backward", "batch", input.n, s.n)?;
    if start + s.c > input.c {
        return Err(Error::invalid("slice backward", "slice outside input"));
    }
    let plane = input.plane();
    let mut dx = Tensor::zeros(input);
    for n in 0..s.n {
        dx.sample_mut(n)[start * plane..(start + s.c) * plane].copy_from_slice(dy.sample(n));
    }
    Ok(dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer; the only mutable op state.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<S = f32> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnRunning<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<T: Scalar>(&self) -> BnRunning<T> {
        BnRunning {
            mean: self.mean.iter().map(|v| T::lit(v.as_f64())).collect(),
            var: self.var.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// Saved tensors for [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    pub mode: Mode,
}

/// Per-channel batch normalization. `gamma`/`beta` have one entry per channel.
///
/// In train mode the batch statistics are used and `running` is updated in
/// place; in eval mode `running` is only read.
pub fn batchnorm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running: &mut BnRunning<S>,
    mode: Mode,
) -> Result<(Tensor<S>, BnCache<S>)> {
    let s = x.shape();
    const OP: &str = "batchnorm";
    check_dim(OP, "gamma length", s.c, gamma.len())?;
    check_dim(OP, "beta length", s.c, beta.len())?;
    check_dim(OP, "running stats", s.c, running.channels())?;
    let eps = S::lit(BN_EPS);
    let count = s.n * s.plane();
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![S::zero(); s.c];
            let mut var = vec![S::zero(); s.c];
            let inv = S::one() / S::lit(count as f64);
            for c in 0..s.c {
                let sum: S = (0..s.n).map(|n| lanes::sum(x.plane(n, c))).sum();
                let m = sum * inv;
                let sq: S = (0..s.n).map(|n| lanes::sq_dev(x.plane(n, c), m)).sum();
                mean[c] = m;
                var[c] = sq * inv;
            }
            let keep = S::lit(BN_MOMENTUM);
            let take = S::one() - keep;
            let unbias = if count > 1 {
                S::lit(count as f64 / (count - 1) as f64)
            } else {
                S::one()
            };
            for c in 0..s.c {
                running.mean[c] = keep * running.mean[c] + take * mean[c];
                running.var[c] = keep * running.var[c] + take * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (running.mean.clone(), running.var.clone()),
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let plane = s.plane();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let planes = x.data().chunks(plane).zip(xhat.data_mut().chunks_mut(plane));
    for (i, ((src, h), out)) in planes.zip(y.data_mut().chunks_mut(plane)).enumerate() {
        let c = i % s.c;
        let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for ((hv, ov), &v) in h.iter_mut().zip(out.iter_mut()).zip(src) {
            *hv = (v - m) * is;
            *ov = g * *hv + b;
        }
    }
    Ok((y, BnCache { xhat, inv_std, mode }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<S: Scalar>(
    cache: &BnCache<S>,
    gamma: &[S],
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let s = dy.shape();
    check_same_shape("batchnorm backward", cache.xhat.shape(), s)?;
    check_dim("batchnorm backward", "gamma length", s.c, gamma.len())?;
    let plane = s.plane();
    let count = S::lit((s.n * plane) as f64);
    let mut dgamma = vec![S::zero(); s.c];
    let mut dbeta = vec![S::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            dbeta[c] += lanes::sum(dy.plane(n, c));
            dgamma[c] += lanes::dot(dy.plane(n, c), cache.xhat.plane(n, c));
        }
    }
    let mut dx = Tensor::zeros(s);
    let planes = dx.data_mut().chunks_mut(plane).zip(dy.data().chunks(plane));
    for (i, ((out, d), h)) in planes.zip(cache.xhat.data().chunks(plane)).enumerate() {
        let c = i % s.c;
        let k = gamma[c] * cache.inv_std[c];
        match cache.mode {
            Mode::Train => {
                let (db, dg) = (dbeta[c] / count, dgamma[c] / count);
                for ((o, &dv), &hv) in out.iter_mut().zip(d).zip(h) {
                    *o = k * (dv - (db + hv * dg));
                }
            }
            Mode::Eval => {
                for (o, &dv) in out.iter_mut().zip(d) {
                    *o = k * dv;
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(S::zero()))
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    x.zip_map(dy, |v, d| if v > S::zero() { d } else { S::zero() })
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| {
        if v >= S::zero() {
            S::one() / (S::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (S::one() + e)
        }
    })
}

/// Takes the forward *output* `y`.
pub fn sigmoid_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    y.zip_map(dy, |s, d| d * s * (S::one() - s))
}

pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let inv = S::one() / S::lit(s.plane() as f64);
    Tensor::from_fn(Shape4::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().copied().sum::<S>() * inv
    })
}

pub fn global_avg_pool_backward<S: Scalar>(input: Shape4, dy: &Tensor<S>) -> Result<Tensor<S>> {
    check_same_shape(
        "global_avg_pool backward",
        Shape4::new(input.n, input.c, 1, 1),
        dy.shape(),
    )?;
    let inv = S::one() / S::lit(input.plane() as f64);
    Ok(Tensor::from_fn(input, |n, c, _, _| dy.at(n, c, 0, 0) * inv))
}

/// 2x2 average pooling with stride 2. Odd trailing rows/cols are dropped.
pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::invalid("avg_pool2", format!("input {s} smaller than 2x2")));
    }
    let q = S::lit(0.25);
    Ok(Tensor::from_fn(
        Shape4::new(s.n, s.c, s.h / 2, s.w / 2),
        |n, c, y, xx| {
            let (y0, x0) = (2 * y, 2 * xx);
            (x.at(n, c, y0, x0) + x.at(n, c, y0, x0 + 1) + x.at(n, c, y0 + 1, x0) + x.at(n, c, y0 + 1, x0 + 1)) * q
        },
    ))
}

pub fn avg_pool2_backward<S: Scalar>(input: Shape4, dy: &Tensor<S>) -> Result<Tensor<S>> {
    let o = dy.shape();
    check_same_shape(
        "avg_pool2 backward",
        Shape4::new(input.n, input.c, input.h / 2, input.w / 2),
        o,
    )?;
    let q = S::lit(0.25);
    Ok(Tensor::from_fn(input, |n, c, y, x| {
        if y / 2 < o.h && x / 2 < o.w {
            dy.at(n, c, y / 2, x / 2) * q
        } else {
            S::zero()
        }
    }))
}

/// Fully connected layer on `(n, f, 1, 1)` features. `w` is `(k, f, 1, 1)`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &[S]) -> Result<Tensor<S>> {
    let s = x.shape();
    let ws = w.shape();
    const OP: &str = "linear";
    check_dim(OP, "input spatial size", 1, s.plane())?;
    check_dim(OP, "features", ws.c, s.c)?;
    check_dim(OP, "bias length", ws.n, b.len())?;
    let f = s.c;
    Ok(Tensor::from_fn(Shape4::new(s.n, ws.n, 1, 1), |n, k, _, _| {
        let xrow = x.sample(n);
        let wrow = &w.data()[k * f..(k + 1) * f];
        xrow.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<S>() + b[k]
    }))
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Vec<S>)> {
    let s = x.shape();
    let ws = w.shape();
    check_same_shape("linear backward", Shape4::new(s.n, ws.n, 1, 1), dy.shape())?;
    let f = s.c;
    let dx = Tensor::from_fn(s, |n, j, _, _| {
        (0..ws.n).map(|k| dy.at(n, k, 0, 0) * w.data()[k * f + j]).sum()
    });
    let dw = Tensor::from_fn(ws, |k, j, _, _| {
        (0..s.n).map(|n| dy.at(n, k, 0, 0) * x.sample(n)[j]).sum()
    });
    let db = (0..ws.n).map(|k| (0..s.n).map(|n| dy.at(n, k, 0, 0)).sum()).collect();
    Ok((dx, dw, db))
}

/// `y[n,c,:,:] = x[n,c,:,:] * scale[n,c]` with `scale` of shape `(n, c, 1, 1)`.
pub fn scale_channels<S: Scalar>(x: &Tensor<S>, scale: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    check_same_shape("scale_channels", Shape4::new(s.n, s.c, 1, 1), scale.shape())?;
    Ok(Tensor::from_fn(s, |n, c, y, xx| {
        x.at(n, c, y, xx) * scale.at(n, c, 0, 0)
    }))
}

/// Returns `(dx, dscale)`.
pub fn scale_channels_backward<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    check_same_shape("scale_channels backward", x.shape(), dy.shape())?;
    let dx = scale_channels(dy, scale)?;
    let s = x.shape();
    let dscale = Tensor::from_fn(scale.shape(), |n, c, _, _| {
        x.plane(n, c).iter().zip(dy.plane(n, c)).map(|(&a, &b)| a * b).sum()
    });
    debug_assert_eq!(dscale.shape(), Shape4::new(s.n, s.c, 1, 1));
    Ok((dx, dscale))
}

/// Mean cross-entropy of softmax(logits) against `labels`, plus `dloss/dlogits`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    let s = logits.shape();
    check_dim("softmax_cross_entropy", "logit spatial size", 1, s.plane())?;
    check_dim("softmax_cross_entropy", "label count", s.n, labels.len())?;
    let k = s.c;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let inv_n = S::one() / S::lit(s.n as f64);
    let mut loss = S::zero();
    let mut grad = Tensor::zeros(s);
    for (n, &label) in labels.iter().enumerate() {
        let row = logits.sample(n);
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let z: S = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[label];
        let g = grad.sample_mut(n);
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *gj = (p - if j == label { S::one() } else { S::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
