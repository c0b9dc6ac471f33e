//! Independent reference implementations used only by tests. Nothing here
//! calls into the kernels under test: every oracle is a plain loop nest over
//! raw slices.

#![allow(dead_code)]

use hgcnet::{Scalar, Shape4, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<S: Scalar>(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::randn(shape, 1.0, rng)
}

fn idx(s: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s[1] + c) * s[2] + y) * s[3] + x
}

/// Six nested loops (batch, out channel, out row, out col, in channel,
/// kernel) with zero padding, accumulated in f64.
pub fn naive_conv<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, groups: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let xs = x.shape().dims();
    let ws = w.shape().dims();
    let (o_total, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let o_g = o_total / groups;
    let oh = (xs[2] + 2 * pad - kh) / stride + 1;
    let ow = (xs[3] + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f64; xs[0] * o_total * oh * ow];
    let os = [xs[0], o_total, oh, ow];
    for n in 0..xs[0] {
        for o in 0..o_total {
            let g = o / o_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs[2] as isize || ix >= xs[3] as isize {
                                    continue;
                                }
                                let xv = xd[idx(xs, n, c, iy as usize, ix as usize)].as_f64();
                                let wv = wd[idx(ws, o, ci, ky, kx)].as_f64();
                                acc += xv * wv;
                            }
                        }
                    }
                    out[idx(os, n, o, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::new(Shape4::new(os[0], os[1], os[2], os[3]), out).unwrap()
}

/// Literal transcription of the HGC recurrence, pixel by pixel:
/// `Y_1 = X_1 W_1`, `Y_i = [X_i ; Y_{i-1}] W_i`, output `[Y_1 ; ... ; Y_G]`.
/// `blocks[i]` is row-major `(O/G) x inputs_i`.
pub fn eq1_oracle(x: &Tensor<f64>, blocks: &[Vec<f64>], out_channels: usize) -> Tensor<f64> {
    let s = x.shape();
    let g = blocks.len();
    let ig = s.c / g;
    let og = out_channels / g;
    let mut out = Tensor::zeros(Shape4::new(s.n, out_channels, s.h, s.w));
    for n in 0..s.n {
        for py in 0..s.h {
            for px in 0..s.w {
                let mut prev: Vec<f64> = Vec::new();
                for (i, wi) in blocks.iter().enumerate() {
                    let width = if i == 0 { ig } else { ig + og };
                    let mut cur = vec![0.0; og];
                    for (o, slot) in cur.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for k in 0..ig {
                            acc += wi[o * width + k] * x.at(n, i * ig + k, py, px);
                        }
                        if i > 0 {
                            for k in 0..og {
                                acc += wi[o * width + ig + k] * prev[k];
                            }
                        }
                        *slot = acc;
                    }
                    for (o, &v) in cur.iter().enumerate() {
                        out.set(n, i * og + o, py, px, v);
                    }
                    prev = cur;
                }
            }
        }
    }
    out
}

/// Per-channel standardization with batch statistics, then affine.
pub fn naive_batchnorm_train(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let s = x.shape();
    let count = (s.n * s.h * s.w) as f64;
    let mut out = x.clone();
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            for y in 0..s.h {
                for xx in 0..s.w {
                    sum += x.at(n, c, y, xx);
                }
            }
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            for y in 0..s.h {
                for xx in 0..s.w {
                    sq += (x.at(n, c, y, xx) - mean).powi(2);
                }
            }
        }
        let inv = 1.0 / (sq / count + eps).sqrt();
        for n in 0..s.n {
            for y in 0..s.h {
                for xx in 0..s.w {
                    out.set(n, c, y, xx, gamma[c] * (x.at(n, c, y, xx) - mean) * inv + beta[c]);
                }
            }
        }
    }
    out
}

pub fn naive_relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Output channel `k` of a `groups`-way shuffle over `c` channels, computed
/// by building the `(groups, c/groups)` matrix and reading its transpose.
pub fn shuffle_permutation(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    let matrix: Vec<Vec<usize>> = (0..groups).map(|g| (0..per).map(|j| g * per + j).collect()).collect();
    let mut out = Vec::with_capacity(c);
    for j in 0..per {
        for row in &matrix {
            out.push(row[j]);
        }
    }
    out
}

pub fn naive_shuffle(x: &Tensor<f64>, groups: usize) -> Tensor<f64> {
    let s = x.shape();
    let perm = shuffle_permutation(s.c, groups);
    Tensor::from_fn(s, |n, c, y, xx| x.at(n, perm[c], y, xx))
}

/// SE gate per sample and channel: pool, fc1, relu, fc2, sigmoid.
pub fn naive_se(x: &Tensor<f64>, w1: &Tensor<f64>, b1: &[f64], w2: &Tensor<f64>, b2: &[f64]) -> Tensor<f64> {
    let s = x.shape();
    let hidden = w1.shape().n;
    let mut out = x.clone();
    for n in 0..s.n {
        let pooled: Vec<f64> = (0..s.c)
            .map(|c| x.plane(n, c).iter().sum::<f64>() / s.plane() as f64)
            .collect();
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let z: f64 = (0..s.c).map(|c| w1.data()[j * s.c + c] * pooled[c]).sum::<f64>() + b1[j];
                z.max(0.0)
            })
            .collect();
        for (c, &bias) in b2.iter().enumerate().take(s.c) {
            let z: f64 = (0..hidden).map(|j| w2.data()[c * hidden + j] * h[j]).sum::<f64>() + bias;
            let gate = 1.0 / (1.0 + (-z).exp());
            for y in 0..s.h {
                for xx in 0..s.w {
                    out.set(n, c, y, xx, x.at(n, c, y, xx) * gate);
                }
            }
        }
    }
    out
}

/// Exact channel-range equality between two tensors of equal shape.
pub fn channels_equal<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, range: std::ops::Range<usize>) -> bool {
    let s = a.shape();
    (0..s.n).all(|n| range.clone().all(|c| a.plane(n, c) == b.plane(n, c)))
}

pub fn max_abs_diff<A: Scalar, B: Scalar>(a: &Tensor<A>, b: &Tensor<B>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
