//! Hierarchical group convolution (HGC).
//!
//! Input channels `X` and filters are split into `G` groups. Group 1 is a
//! plain 1x1 convolution of `X_1`; every later group convolves the channel
//! concatenation of its own input slice and the previous group's output:
//!
//! ```text
//! Y_1 = X_1 * W_1
//! Y_i = concat(X_i, Y_{i-1}) * W_i      1 < i <= G
//! Y   = concat(Y_1, ..., Y_G)
//! ```
//!
//! so `Y_i` sees every input group `X_k` with `k <= i`. The groups form a
//! strict chain and are evaluated in order.

use std::fmt;

use rand::Rng;

use crate::error::{check_dim, check_divisible, Error, Result};
use crate::tensor::conv::{conv2d, conv2d_backward};
use crate::tensor::ops::{concat_channels, slice_channels};
use crate::tensor::{ConvWeights, Scalar, Shape4, Tensor};

/// `(I, O, G)` of one HGC layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HgcLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl HgcLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, groups: usize) -> Result<Self> {
        const OP: &str = "hgc spec";
        if groups == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid(OP, "channels and groups must be >= 1"));
        }
        check_divisible(OP, "in_channels", in_channels, groups)?;
        check_divisible(OP, "out_channels", out_channels, groups)?;
        Ok(Self {
            in_channels,
            out_channels,
            groups,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Input channels seen by block `i` (0-based).
    pub fn block_inputs(&self, i: usize) -> usize {
        if i == 0 {
            self.in_per_group()
        } else {
            self.in_per_group() + self.out_per_group()
        }
    }

    pub fn block_shape(&self, i: usize) -> Shape4 {
        Shape4::new(self.out_per_group(), self.block_inputs(i), 1, 1)
    }
}

impl fmt::Display for HgcLayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "I={} O={} G={}", self.in_channels, self.out_channels, self.groups)
    }
}

/// The `G` weight blocks of one HGC layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HgcWeights<S = f32> {
    blocks: Vec<ConvWeights<S>>,
}

impl<S: Scalar> HgcWeights<S> {
    pub fn new(spec: HgcLayerSpec, blocks: Vec<ConvWeights<S>>) -> Result<Self> {
        const OP: &str = "hgc weights";
        check_dim(OP, "block count", spec.groups, blocks.len())?;
        for (i, b) in blocks.iter().enumerate() {
            let want = spec.block_shape(i);
            let got = b.weight.shape();
            check_dim(OP, "block out_channels", want.n, got.n)?;
            check_dim(OP, "block in_channels", want.c, got.c)?;
            check_dim(OP, "block kernel height", 1, got.h)?;
            check_dim(OP, "block kernel width", 1, got.w)?;
            check_dim(OP, "block groups", 1, b.groups)?;
        }
        Ok(Self { blocks })
    }

    pub fn zeros(spec: HgcLayerSpec) -> Self {
        Self::from_fn(spec, |_, shape| Tensor::zeros(shape))
    }

    /// `std = sqrt(2 / fan_in)` per block.
    pub fn kaiming<R: Rng + ?Sized>(spec: HgcLayerSpec, rng: &mut R) -> Self {
        Self::from_fn(spec, |_, shape| {
            Tensor::randn(shape, (2.0 / shape.c as f64).sqrt(), rng)
        })
    }

    pub fn from_fn(spec: HgcLayerSpec, mut f: impl FnMut(usize, Shape4) -> Tensor<S>) -> Self {
        let blocks = (0..spec.groups)
            .map(|i| ConvWeights {
                weight: f(i, spec.block_shape(i)),
                groups: 1,
                bias: None,
            })
            .collect();
        Self { blocks }
    }

    pub fn blocks(&self) -> &[ConvWeights<S>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ConvWeights<S>] {
        &mut self.blocks
    }

    pub fn scalar_count(&self) -> usize {
        self.blocks.iter().map(ConvWeights::param_count).sum()
    }
}

/// Per-group inputs saved by [`hgc_forward_cached`].
#[derive(Clone, Debug)]
pub struct HgcCache<S> {
    spec: Option<HgcLayerSpec>,
    input: Shape4,
    /// `X_1`, then `concat(X_i, Y_{i-1})` for later groups.
    block_inputs: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for HgcCache<S> {
    fn default() -> Self {
        Self {
            spec: None,
            input: Shape4::new(0, 0, 0, 0),
            block_inputs: Vec::new(),
        }
    }
}

impl<S: Scalar> HgcCache<S> {
    pub fn spec(&self) -> HgcLayerSpec {
        self.spec.expect("populated cache")
    }

    pub fn is_empty(&self) -> bool {
        self.spec.is_none()
    }
}

fn check_input(x: Shape4, w: &HgcWeights<impl Scalar>, spec: HgcLayerSpec) -> Result<()> {
    check_dim("hgc_forward", "input channels", spec.in_channels, x.c)?;
    check_dim("hgc_forward", "block count", spec.groups, w.blocks.len())?;
    for (i, b) in w.blocks.iter().enumerate() {
        let want = spec.block_shape(i);
        check_dim("hgc_forward", "block in_channels", want.c, b.weight.shape().c)?;
        check_dim("hgc_forward", "block out_channels", want.n, b.weight.shape().n)?;
    }
    Ok(())
}

pub fn hgc_forward<S: Scalar>(x: &Tensor<S>, w: &HgcWeights<S>, spec: HgcLayerSpec) -> Result<Tensor<S>> {
    hgc_forward_cached(x, w, spec).map(|(y, _)| y)
}

pub fn hgc_forward_cached<S: Scalar>(
    x: &Tensor<S>,
    w: &HgcWeights<S>,
    spec: HgcLayerSpec,
) -> Result<(Tensor<S>, HgcCache<S>)> {
    check_input(x.shape(), w, spec)?;
    let ig = spec.in_per_group();
    let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(spec.groups);
    let mut block_inputs = Vec::with_capacity(spec.groups);
    for (i, block) in w.blocks.iter().enumerate() {
        let xi = slice_channels(x, i * ig, ig)?;
        let input = match outputs.last() {
            None => xi,
            Some(prev) => concat_channels(&[&xi, prev])?,
        };
        outputs.push(conv2d(&input, block, 1, 0)?);
        block_inputs.push(input);
    }
    let refs: Vec<&Tensor<S>> = outputs.iter().collect();
    let y = concat_channels(&refs)?;
    Ok((
        y,
        HgcCache {
            spec: Some(spec),
            input: x.shape(),
            block_inputs,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct HgcGrads<S> {
    pub dx: Tensor<S>,
    /// One gradient per weight block, same shapes as the blocks.
    pub dw: Vec<Tensor<S>>,
}

/// Reverse of the group chain: the gradient reaching `Y_{i-1}` is its slice of
/// the upstream gradient plus what flows back through block `i`'s input.
pub fn hgc_backward<S: Scalar>(cache: &HgcCache<S>, w: &HgcWeights<S>, dy: &Tensor<S>) -> Result<HgcGrads<S>> {
    let spec = cache.spec.ok_or(Error::MissingForward { op: "hgc_backward" })?;
    check_input(cache.input, w, spec)?;
    let expect = Shape4::new(cache.input.n, spec.out_channels, cache.input.h, cache.input.w);
    crate::tensor::check_same_shape("hgc_backward", expect, dy.shape())?;
    let (ig, og) = (spec.in_per_group(), spec.out_per_group());

    let mut dys: Vec<Tensor<S>> = (0..spec.groups)
        .map(|i| slice_channels(dy, i * og, og))
        .collect::<Result<_>>()?;
    let mut dxs: Vec<Tensor<S>> = Vec::with_capacity(spec.groups);
    let mut dws: Vec<Tensor<S>> = Vec::with_capacity(spec.groups);
    for i in (0..spec.groups).rev() {
        let g = conv2d_backward(&cache.block_inputs[i], &w.blocks[i], 1, 0, &dys[i])?;
        if i > 0 {
            let dprev = slice_channels(&g.dx, ig, og)?;
            dys[i - 1].add_assign(&dprev)?;
            dxs.push(slice_channels(&g.dx, 0, ig)?);
        } else {
            dxs.push(g.dx);
        }
        dws.push(g.dw);
    }
    dxs.reverse();
    dws.reverse();
    let refs: Vec<&Tensor<S>> = dxs.iter().collect();
    Ok(HgcGrads {
        dx: concat_channels(&refs)?,
        dw: dws,
    })
}

/// `(O/G)(I/G) + (G-1)(O/G)(O/G + I/G)`.
pub fn hgc_param_count(spec: HgcLayerSpec) -> usize {
    let (ig, og) = (spec.in_per_group(), spec.out_per_group());
    og * ig + (spec.groups - 1) * og * (og + ig)
}

/// `I * O / G`.
pub fn sgc_param_count(spec: HgcLayerSpec) -> usize {
    spec.in_channels * spec.out_channels / spec.groups
}

/// Non-negative rational in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::ops::Add for Ratio {
    type Output = Ratio;

    fn add(self, o: Self) -> Self {
        Self::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
}

impl std::ops::Mul for Ratio {
    type Output = Ratio;

    fn mul(self, o: Self) -> Self {
        Self::new(self.num * o.num, self.den * o.den)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// HGC parameters relative to a dense `I x O` 1x1 convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionRatio {
    /// `hgc_param_count / (I * O)`.
    pub exact: Ratio,
    /// `(O / (I G) + 1/G)(1 - 1/G) + 1/G^2`, algebraically equal to `exact`.
    pub closed_form: Ratio,
    /// `(2/G)(1 - 1/G) + 1/G^2`, the `O = I` specialization.
    pub approx: f64,
}

pub fn compression_ratio(spec: HgcLayerSpec) -> CompressionRatio {
    let (i, o, g) = (spec.in_channels as u64, spec.out_channels as u64, spec.groups as u64);
    let exact = Ratio::new(hgc_param_count(spec) as u64, i * o);
    let closed_form = (Ratio::new(o, i * g) + Ratio::new(1, g)) * Ratio::new(g - 1, g) + Ratio::new(1, g * g);
    let gf = g as f64;
    CompressionRatio {
        exact,
        closed_form,
        approx: (2.0 / gf) * (1.0 - 1.0 / gf) + 1.0 / (gf * gf),
    }
}

/// Same-shape rational form of the approximation, `(2G - 1) / G^2`.
pub fn approx_ratio_exact(groups: usize) -> Ratio {
    let g = groups as u64;
    Ratio::new(2 * g - 1, g * g)
}

/// Standard group convolution baseline: grouped 1x1 conv with `groups` groups.
pub fn sgc_forward<S: Scalar>(x: &Tensor<S>, w: &ConvWeights<S>, groups: usize) -> Result<Tensor<S>> {
    check_dim("sgc_forward", "groups", groups, w.groups)?;
    check_dim("sgc_forward", "kernel height", 1, w.kernel().0)?;
    check_dim("sgc_forward", "kernel width", 1, w.kernel().1)?;
    conv2d(x, w, 1, 0)
}
