//! HGCNet family: declarative specs, the built network, and static cost
//! analysis.

mod analyze;
pub(crate) mod config;

pub use analyze::{
    analyze, analyze_layer, compare_variants, comparison_csv, LayerKind, LayerRecord, ParamReport, VariantRow,
};
pub use config::{parse_key_values, KeyValue};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BatchNorm, CompactModule, HgcModuleSpec, Variant, DEFAULT_BOTTLENECK_FACTOR, DEFAULT_SE_REDUCTION,
};
use crate::error::{check_dim, Error, Result};
use crate::tensor::autodiff::{Tape, Var};
use crate::tensor::ops::Mode;
use crate::tensor::param::{Ctx, ParamId, ParamStore};
use crate::tensor::{Scalar, Shape4, Tensor};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub num_modules: usize,
    pub growth_rate: usize,
}

impl StageSpec {
    pub fn new(num_modules: usize, growth_rate: usize) -> Self {
        Self {
            num_modules,
            growth_rate,
        }
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.num_modules, self.growth_rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub stages: Vec<StageSpec>,
    pub groups: usize,
    pub variant: Variant,
    pub use_se: bool,
    pub se_reduction: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
    /// Square input resolution.
    pub image_size: usize,
    /// Name of the preset this spec came from, if any.
    pub preset: Option<String>,
}

/// Named presets: `(name, modules per stage, growth rates, stem width)`.
///
/// The widths are calibrated so every group count in {1, 2, 4, 6} divides
/// every module width.
pub const PRESETS: &[(&str, [usize; 3], [usize; 3], usize)] = &[
    ("hgcnet-42", [3, 3, 7], [12, 24, 48], 48),
    ("hgcnet-67", [5, 5, 12], [12, 24, 48], 48),
    ("hgcnet-91", [7, 6, 17], [12, 24, 48], 48),
];

impl NetworkSpec {
    pub fn new(stages: Vec<StageSpec>, groups: usize, variant: Variant) -> Self {
        Self {
            stages,
            groups,
            variant,
            use_se: false,
            se_reduction: DEFAULT_SE_REDUCTION,
            num_classes: 10,
            stem_channels: 16,
            bottleneck_factor: DEFAULT_BOTTLENECK_FACTOR,
            image_size: 32,
            preset: None,
        }
    }

    pub fn preset(name: &str, groups: usize, variant: Variant) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        let &(pname, modules, growth, stem) = PRESETS
            .iter()
            .find(|p| p.0 == key)
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?;
        let stages = modules.iter().zip(growth).map(|(&m, g)| StageSpec::new(m, g)).collect();
        let mut spec = Self::new(stages, groups, variant);
        spec.stem_channels = stem;
        spec.preset = Some(pname.to_string());
        Ok(spec)
    }

    /// One stage of two modules with growth rate 8: the smallest useful net.
    pub fn tiny(groups: usize, variant: Variant) -> Self {
        Self::new(vec![StageSpec::new(2, 8)], groups, variant)
    }

    /// Conv layers counted as depth: three per module plus stem and classifier.
    pub fn depth(&self) -> usize {
        3 * self.num_modules() + 2
    }

    pub fn num_modules(&self) -> usize {
        self.stages.iter().map(|s| s.num_modules).sum()
    }

    pub fn with_groups(&self, groups: usize) -> Self {
        Self { groups, ..self.clone() }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    /// Module specs in build order with their stage index and spatial size.
    pub fn module_plan(&self) -> Vec<(usize, usize, HgcModuleSpec)> {
        let mut plan = Vec::new();
        let mut width = self.stem_channels;
        let mut size = self.image_size;
        for (si, stage) in self.stages.iter().enumerate() {
            for k in 0..stage.num_modules {
                let mut m = HgcModuleSpec::new(
                    width + k * stage.growth_rate,
                    stage.growth_rate,
                    self.groups,
                    self.variant,
                );
                m.use_se = self.use_se;
                m.se_reduction = self.se_reduction;
                m.bottleneck_width = self.bottleneck_factor * stage.growth_rate;
                plan.push((si, size, m));
            }
            width += stage.num_modules * stage.growth_rate;
            if si + 1 < self.stages.len() {
                size /= 2;
            }
        }
        plan
    }

    /// Channels entering the classifier.
    pub fn feature_channels(&self) -> usize {
        self.stem_channels + self.stages.iter().map(|s| s.num_modules * s.growth_rate).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.num_modules == 0 || s.growth_rate == 0 {
                return Err(Error::Config(format!(
                    "stage {i}: modules and growth rate must be positive"
                )));
            }
            if i > 0 && s.growth_rate != 2 * self.stages[i - 1].growth_rate {
                return Err(Error::Config(format!(
                    "stage {i}: growth rate {} must double the previous stage's {}",
                    s.growth_rate,
                    self.stages[i - 1].growth_rate
                )));
            }
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.stem_channels == 0 || self.bottleneck_factor == 0 {
            return Err(Error::Config("stem and bottleneck factor must be positive".into()));
        }
        let down = 1usize << (self.stages.len() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(down) {
            return Err(Error::Config(format!(
                "image size {} must be divisible by {down} for {} stages",
                self.image_size,
                self.stages.len()
            )));
        }
        for (index, (_, _, m)) in self.module_plan().iter().enumerate() {
            m.validate().map_err(|e| Error::Module {
                index,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self.stages.iter().map(|s| s.to_string()).collect();
        write!(
            f,
            "variant={} groups={} stages={} se={} classes={} stem={}",
            self.variant,
            self.groups,
            stages.join(","),
            self.use_se,
            self.num_classes,
            self.stem_channels
        )
    }
}

/// Parameter handles of a built network.
#[derive(Clone, Debug)]
pub struct NetworkLayout {
    pub stem: ParamId,
    pub stages: Vec<Vec<CompactModule>>,
    pub head_bn: BatchNorm,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

impl NetworkLayout {
    pub fn build<S: Scalar, R: Rng + ?Sized>(
        spec: &NetworkSpec,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let stem = store.add_gaussian(
            "stem.weight",
            Shape4::new(spec.stem_channels, INPUT_CHANNELS, 3, 3),
            2.0,
            rng,
        );
        let mut stages: Vec<Vec<CompactModule>> = vec![Vec::new(); spec.stages.len()];
        for (index, (si, _, m)) in spec.module_plan().into_iter().enumerate() {
            let k = stages[si].len();
            let module =
                CompactModule::new(store, rng, &format!("stage{si}.module{k}"), m).map_err(|e| Error::Module {
                    index,
                    source: Box::new(e),
                })?;
            stages[si].push(module);
        }
        let feat = spec.feature_channels();
        let head_bn = BatchNorm::new(store, "head.bn", feat);
        let fc_w = store.add_gaussian("head.fc.weight", Shape4::new(spec.num_classes, feat, 1, 1), 1.0, rng);
        let fc_b = store.add(
            "head.fc.bias",
            Tensor::zeros(Shape4::new(1, spec.num_classes, 1, 1)),
            false,
        );
        Ok(Self {
            stem,
            stages,
            head_bn,
            fc_w,
            fc_b,
        })
    }

    /// Logits `(n, classes, 1, 1)` for an image batch `(n, 3, h, w)`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let c = ctx.tape.try_value(x)?.shape().c;
        check_dim("network forward", "input channels", INPUT_CHANNELS, c)?;
        let w = ctx.param(self.stem)?;
        let mut h = ctx.tape.conv2d(x, w, 1, 1, 1)?;
        for (si, stage) in self.stages.iter().enumerate() {
            let mut feats = vec![h];
            for module in stage {
                let input = if feats.len() == 1 {
                    feats[0]
                } else {
                    ctx.tape.concat(&feats)?
                };
                feats.push(module.forward(ctx, input)?);
            }
            h = ctx.tape.concat(&feats)?;
            if si + 1 < self.stages.len() {
                h = ctx.tape.avg_pool2(h)?;
            }
        }
        let h = self.head_bn.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.tape.global_avg_pool(h)?;
        let (w, b) = (ctx.param(self.fc_w)?, ctx.param(self.fc_b)?);
        ctx.tape.linear(h, w, b)
    }
}

/// Result of one training forward/backward pass.
#[derive(Clone, Debug)]
pub struct StepOutput<S = f32> {
    pub loss: f64,
    pub logits: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Network<S: Scalar = f32> {
    spec: NetworkSpec,
    layout: NetworkLayout,
    store: ParamStore<S>,
}

impl<S: Scalar> Network<S> {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        Self::with_rng(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = NetworkLayout::build(&spec, &mut store, rng)?;
        Ok(Self { spec, layout, store })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &NetworkLayout {
        &self.layout
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Eval-mode logits, shape `(n, classes)` flattened to `(n, classes, 1, 1)`.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut ctx = self.store.eval_ctx(&mut tape);
        let xv = ctx.tape.leaf(x.clone());
        let y = self.layout.forward(&mut ctx, xv)?;
        drop(ctx);
        Ok(tape.value(y).clone())
    }

    /// Train-mode forward and backward. Gradients replace `Param::grad`;
    /// running statistics are updated.
    pub fn train_step(&mut self, x: &Tensor<S>, labels: &[usize]) -> Result<StepOutput<S>> {
        self.store.zero_grads();
        let mut tape = Tape::new();
        let mut ctx = self.store.ctx(&mut tape, Mode::Train);
        let xv = ctx.tape.leaf(x.clone());
        let logits = self.layout.forward(&mut ctx, xv)?;
        let loss = ctx.tape.softmax_cross_entropy(logits, labels)?;
        let bindings = ctx.into_bindings();
        let grads = tape.backward(loss)?;
        self.store.accumulate(&bindings, &grads)?;
        Ok(StepOutput {
            loss: tape.value(loss).data()[0].as_f64(),
            logits: tape.value(logits).clone(),
        })
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            store: self.store.cast(),
        }
    }
}
