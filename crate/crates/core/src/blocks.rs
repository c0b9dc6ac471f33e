//! Composite blocks: the HGC module, its SGC ablation twin, the dense
//! bottleneck baseline and the squeeze-and-excitation gate.
//!
//! All three module variants share one pipeline and differ only in the 1x1
//! reduction and whether a channel shuffle precedes it:
//!
//! ```text
//! BN -> ReLU -> [shuffle(G)] -> 1x1 (HGC | SGC | dense) -> BN
//!    -> depthwise 3x3 -> pointwise 1x1 -> BN -> ReLU -> [SE]
//! ```
//!
//! There is deliberately no ReLU between the reduction and the depthwise conv.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_divisible, Error, Result};
use crate::hgc::{hgc_param_count, HgcLayerSpec};
use crate::tensor::autodiff::{Tape, Var};
use crate::tensor::ops::Mode;
use crate::tensor::param::{Ctx, ParamId, ParamStore, StatId};
use crate::tensor::{Scalar, Shape4, Tensor};

pub const DEFAULT_SE_REDUCTION: usize = 4;
pub const DEFAULT_BOTTLENECK_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Hgc,
    Sgc,
    Bottleneck,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hgc" => Ok(Variant::Hgc),
            "sgc" => Ok(Variant::Sgc),
            "bottleneck" | "dense" => Ok(Variant::Bottleneck),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected hgc, sgc or bottleneck)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Hgc => "hgc",
            Variant::Sgc => "sgc",
            Variant::Bottleneck => "bottleneck",
        })
    }
}

/// Shape of one densely connected module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HgcModuleSpec {
    pub in_channels: usize,
    /// Output channels of the module.
    pub growth_rate: usize,
    pub groups: usize,
    pub variant: Variant,
    pub use_se: bool,
    pub se_reduction: usize,
    /// Width of the 1x1 reduction output / depthwise stage.
    pub bottleneck_width: usize,
}

impl HgcModuleSpec {
    pub fn new(in_channels: usize, growth_rate: usize, groups: usize, variant: Variant) -> Self {
        Self {
            in_channels,
            growth_rate,
            groups,
            variant,
            use_se: false,
            se_reduction: DEFAULT_SE_REDUCTION,
            bottleneck_width: DEFAULT_BOTTLENECK_FACTOR * growth_rate,
        }
    }

    pub fn with_se(mut self, use_se: bool) -> Self {
        self.use_se = use_se;
        self
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "module spec";
        if self.in_channels == 0 || self.growth_rate == 0 || self.bottleneck_width == 0 {
            return Err(Error::Config("module widths must be positive".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be >= 1".into()));
        }
        if self.variant != Variant::Bottleneck {
            check_divisible(OP, "in_channels", self.in_channels, self.groups)?;
            check_divisible(OP, "bottleneck_width", self.bottleneck_width, self.groups)?;
        }
        if self.use_se {
            check_divisible(OP, "growth_rate", self.growth_rate, self.se_reduction)?;
        }
        Ok(())
    }

    /// Effective group count of the reduction (1 for the dense bottleneck).
    pub fn reduce_groups(&self) -> usize {
        match self.variant {
            Variant::Bottleneck => 1,
            _ => self.groups,
        }
    }

    /// Scalar count of the 1x1 reduction.
    pub fn reduce_params(&self) -> usize {
        let (i, o) = (self.in_channels, self.bottleneck_width);
        match self.variant {
            Variant::Bottleneck => i * o,
            Variant::Sgc => i * o / self.groups,
            Variant::Hgc => hgc_param_count(HgcLayerSpec {
                in_channels: i,
                out_channels: o,
                groups: self.groups,
            }),
        }
    }
}

/// Batch norm with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stat: StatId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let shape = Shape4::new(1, channels, 1, 1);
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(shape), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape), false),
            stat: store.add_stats(format!("{name}.running"), channels),
            channels,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        ctx.batchnorm(x, self.gamma, self.beta, self.stat)
    }
}

/// The module's 1x1 channel reduction.
#[derive(Clone, Debug)]
pub enum Reduce {
    Dense(ParamId),
    Group { w: ParamId, groups: usize },
    Hgc { spec: HgcLayerSpec, blocks: Vec<ParamId> },
}

impl Reduce {
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        match self {
            Reduce::Dense(w) => {
                let w = ctx.param(*w)?;
                ctx.tape.conv2d(x, w, 1, 1, 0)
            }
            Reduce::Group { w, groups } => {
                let w = ctx.param(*w)?;
                ctx.tape.conv2d(x, w, *groups, 1, 0)
            }
            Reduce::Hgc { spec, blocks } => {
                let ws = blocks.iter().map(|&b| ctx.param(b)).collect::<Result<Vec<_>>>()?;
                ctx.tape.hgc(x, &ws, *spec)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Reduce::Dense(w) | Reduce::Group { w, .. } => vec![*w],
            Reduce::Hgc { blocks, .. } => blocks.clone(),
        }
    }
}

/// Squeeze-and-excitation: `x * sigmoid(fc2(relu(fc1(avgpool(x)))))`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl SeBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("se reduction must be >= 1".into()));
        }
        check_divisible("se block", "channels", channels, reduction)?;
        let hidden = channels / reduction;
        Ok(Self {
            fc1_w: store.add_gaussian(
                format!("{name}.fc1.weight"),
                Shape4::new(hidden, channels, 1, 1),
                2.0,
                rng,
            ),
            fc1_b: store.add(
                format!("{name}.fc1.bias"),
                Tensor::zeros(Shape4::new(1, hidden, 1, 1)),
                false,
            ),
            fc2_w: store.add_gaussian(
                format!("{name}.fc2.weight"),
                Shape4::new(channels, hidden, 1, 1),
                1.0,
                rng,
            ),
            fc2_b: store.add(
                format!("{name}.fc2.bias"),
                Tensor::zeros(Shape4::new(1, channels, 1, 1)),
                false,
            ),
            channels,
            hidden,
        })
    }

    /// Returns `(output, gate)`; the gate has shape `(n, c, 1, 1)`.
    pub fn forward_gate<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<(Var, Var)> {
        let c = ctx.tape.try_value(x)?.shape().c;
        crate::error::check_dim("se_forward", "channels", self.channels, c)?;
        let pooled = ctx.tape.global_avg_pool(x)?;
        let (w1, b1) = (ctx.param(self.fc1_w)?, ctx.param(self.fc1_b)?);
        let h = ctx.tape.linear(pooled, w1, b1)?;
        let h = ctx.tape.relu(h)?;
        let (w2, b2) = (ctx.param(self.fc2_w)?, ctx.param(self.fc2_b)?);
        let z = ctx.tape.linear(h, w2, b2)?;
        let gate = ctx.tape.sigmoid(z)?;
        Ok((ctx.tape.scale_channels(x, gate)?, gate))
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        self.forward_gate(ctx, x).map(|(y, _)| y)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.hidden + self.hidden + self.channels
    }
}

/// One densely connected module (HGC, SGC or bottleneck variant).
#[derive(Clone, Debug)]
pub struct CompactModule {
    pub spec: HgcModuleSpec,
    pub bn_in: BatchNorm,
    pub shuffle_groups: Option<usize>,
    pub reduce: Reduce,
    pub bn_mid: BatchNorm,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bn_out: BatchNorm,
    pub se: Option<SeBlock>,
}

/// Intermediate vars of one module forward.
#[derive(Clone, Copy, Debug)]
pub struct ModuleTrace {
    /// Output of the 1x1 reduction, before its BN.
    pub reduced: Var,
    pub output: Var,
}

impl CompactModule {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        spec: HgcModuleSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let (cin, width, g) = (spec.in_channels, spec.bottleneck_width, spec.groups);
        let bn_in = BatchNorm::new(store, &format!("{name}.bn_in"), cin);
        let reduce = match spec.variant {
            Variant::Bottleneck => Reduce::Dense(store.add_gaussian(
                format!("{name}.reduce.weight"),
                Shape4::new(width, cin, 1, 1),
                2.0,
                rng,
            )),
            Variant::Sgc => Reduce::Group {
                w: store.add_gaussian(
                    format!("{name}.reduce.weight"),
                    Shape4::new(width, cin / g, 1, 1),
                    2.0,
                    rng,
                ),
                groups: g,
            },
            Variant::Hgc => {
                let hspec = HgcLayerSpec::new(cin, width, g)?;
                let blocks = (0..g)
                    .map(|i| store.add_gaussian(format!("{name}.reduce.block{i}"), hspec.block_shape(i), 2.0, rng))
                    .collect();
                Reduce::Hgc { spec: hspec, blocks }
            }
        };
        let shuffle_groups = (spec.variant != Variant::Bottleneck && g > 1).then_some(g);
        let bn_mid = BatchNorm::new(store, &format!("{name}.bn_mid"), width);
        let depthwise = store.add_gaussian(
            format!("{name}.depthwise.weight"),
            Shape4::new(width, 1, 3, 3),
            2.0,
            rng,
        );
        let pointwise = store.add_gaussian(
            format!("{name}.pointwise.weight"),
            Shape4::new(spec.growth_rate, width, 1, 1),
            2.0,
            rng,
        );
        let bn_out = BatchNorm::new(store, &format!("{name}.bn_out"), spec.growth_rate);
        let se = if spec.use_se {
            Some(SeBlock::new(
                store,
                rng,
                &format!("{name}.se"),
                spec.growth_rate,
                spec.se_reduction,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            bn_in,
            shuffle_groups,
            reduce,
            bn_mid,
            depthwise,
            pointwise,
            bn_out,
            se,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        self.forward_traced(ctx, x).map(|t| t.output)
    }

    pub fn forward_traced<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<ModuleTrace> {
        let c = ctx.tape.try_value(x)?.shape().c;
        crate::error::check_dim("module forward", "input channels", self.spec.in_channels, c)?;
        let h = self.bn_in.forward(ctx, x)?;
        let mut h = ctx.tape.relu(h)?;
        if let Some(g) = self.shuffle_groups {
            h = ctx.tape.channel_shuffle(h, g)?;
        }
        let reduced = self.reduce.forward(ctx, h)?;
        let h = self.bn_mid.forward(ctx, reduced)?;
        let dw = ctx.param(self.depthwise)?;
        let h = ctx.tape.depthwise_conv3x3(h, dw, 1, 1)?;
        let pw = ctx.param(self.pointwise)?;
        let h = ctx.tape.conv2d(h, pw, 1, 1, 0)?;
        let h = self.bn_out.forward(ctx, h)?;
        let mut output = ctx.tape.relu(h)?;
        if let Some(se) = &self.se {
            output = se.forward(ctx, output)?;
        }
        Ok(ModuleTrace { reduced, output })
    }

    /// Trainable scalars of this module, computed from its spec.
    pub fn param_count(&self) -> usize {
        let s = &self.spec;
        let bn = 2 * (s.in_channels + s.bottleneck_width + s.growth_rate);
        bn + s.reduce_params()
            + 9 * s.bottleneck_width
            + s.bottleneck_width * s.growth_rate
            + self.se.as_ref().map_or(0, SeBlock::param_count)
    }
}

/// Run one module standalone on a fresh tape.
pub fn module_forward<S: Scalar>(
    store: &mut ParamStore<S>,
    module: &CompactModule,
    x: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let mut ctx = store.ctx(&mut tape, mode);
    let xv = ctx.tape.leaf(x.clone());
    let y = module.forward(&mut ctx, xv)?;
    drop(ctx);
    Ok(tape.value(y).clone())
}

/// Run an SE block standalone on a fresh tape.
pub fn se_forward<S: Scalar>(store: &ParamStore<S>, se: &SeBlock, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let mut ctx = store.eval_ctx(&mut tape);
    let xv = ctx.tape.leaf(x.clone());
    let y = se.forward(&mut ctx, xv)?;
    drop(ctx);
    Ok(tape.value(y).clone())
}
