//! Gradient-check suite over every differentiable op, the compact modules
//! and a small end-to-end network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{CompactModule, HgcModuleSpec, Variant};
use crate::error::Result;
use crate::hgc::HgcLayerSpec;
use crate::net::{NetworkLayout, NetworkSpec, StageSpec};
use crate::tensor::autodiff::{Tape, Var};
use crate::tensor::gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
use crate::tensor::ops::{BnRunning, Mode};
use crate::tensor::param::ParamStore;
use crate::tensor::{Shape4, Tensor};

/// Central-difference step for module and network graphs. Their truncation
/// error at the default step of 1e-3 sits near the 1e-4 tolerance, while
/// roundoff at 1e-4 is still far below it.
pub const COMPOSITE_STEP: f64 = 1e-4;

/// Smallest magnitude kept for inputs that feed a ReLU directly.
pub const RELU_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn randn(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Resample entries closer than [`RELU_MARGIN`] to zero.
pub fn away_from_zero(mut t: Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    for v in t.data_mut() {
        while v.abs() < RELU_MARGIN {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    t
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

#[allow(clippy::vec_init_then_push)]
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    cases.push((
        "conv2d 3x3 groups 2 pad 1",
        vec![randn(shape(1, 4, 3, 3), rng), randn(shape(4, 2, 3, 3), rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1, 1)),
    ));
    cases.push((
        "conv2d 3x3 stride 2",
        vec![randn(shape(2, 3, 6, 6), rng), randn(shape(4, 3, 3, 3), rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 1, 2, 1)),
    ));
    cases.push((
        "conv2d 1x1 groups 3",
        vec![randn(shape(2, 6, 3, 3), rng), randn(shape(6, 2, 1, 1), rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 3, 1, 0)),
    ));
    cases.push((
        "depthwise 3x3 pad 1",
        vec![randn(shape(2, 3, 5, 5), rng), randn(shape(3, 1, 3, 3), rng)],
        Box::new(|t, v| t.depthwise_conv3x3(v[0], v[1], 1, 1)),
    ));
    cases.push((
        "depthwise 3x3 stride 2",
        vec![randn(shape(1, 2, 6, 6), rng), randn(shape(2, 1, 3, 3), rng)],
        Box::new(|t, v| t.depthwise_conv3x3(v[0], v[1], 2, 1)),
    ));
    for groups in [2usize, 3] {
        let spec = HgcLayerSpec::new(6, 6, groups).expect("valid hgc spec");
        let mut inputs = vec![randn(shape(2, 6, 2, 2), rng)];
        for i in 0..groups {
            inputs.push(randn(spec.block_shape(i), rng));
        }
        cases.push((
            if groups == 2 { "hgc G=2" } else { "hgc G=3" },
            inputs,
            Box::new(move |t, v| t.hgc(v[0], &v[1..], spec)),
        ));
    }
    cases.push((
        "channel shuffle",
        vec![randn(shape(2, 6, 2, 2), rng)],
        Box::new(|t, v| t.channel_shuffle(v[0], 3)),
    ));
    cases.push((
        "concat",
        vec![randn(shape(2, 2, 2, 2), rng), randn(shape(2, 3, 2, 2), rng)],
        Box::new(|t, v| t.concat(&[v[0], v[1]])),
    ));
    cases.push((
        "slice channels",
        vec![randn(shape(2, 5, 2, 2), rng)],
        Box::new(|t, v| t.slice_channels(v[0], 1, 3)),
    ));
    for mode in [Mode::Train, Mode::Eval] {
        let mut running = BnRunning::new(3);
        running.mean = vec![0.1, -0.2, 0.3];
        running.var = vec![0.5, 1.5, 2.0];
        cases.push((
            if mode == Mode::Train {
                "batchnorm train"
            } else {
                "batchnorm eval"
            },
            vec![
                randn(shape(4, 3, 2, 2), rng),
                randn(shape(1, 3, 1, 1), rng),
                randn(shape(1, 3, 1, 1), rng),
            ],
            Box::new(move |t, v| t.batchnorm(v[0], v[1], v[2], &mut running.clone(), mode)),
        ));
    }
    let relu_in = away_from_zero(randn(shape(2, 3, 3, 3), rng), rng);
    cases.push(("relu", vec![relu_in], Box::new(|t, v| t.relu(v[0]))));
    cases.push((
        "sigmoid",
        vec![randn(shape(2, 3, 2, 2), rng)],
        Box::new(|t, v| t.sigmoid(v[0])),
    ));
    cases.push((
        "global average pool",
        vec![randn(shape(2, 3, 3, 3), rng)],
        Box::new(|t, v| t.global_avg_pool(v[0])),
    ));
    cases.push((
        "average pool 2x2",
        vec![randn(shape(2, 2, 4, 4), rng)],
        Box::new(|t, v| t.avg_pool2(v[0])),
    ));
    cases.push((
        "linear",
        vec![
            randn(shape(3, 4, 1, 1), rng),
            randn(shape(5, 4, 1, 1), rng),
            randn(shape(1, 5, 1, 1), rng),
        ],
        Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    ));
    cases.push((
        "scale channels",
        vec![randn(shape(2, 3, 2, 2), rng), randn(shape(2, 3, 1, 1), rng)],
        Box::new(|t, v| t.scale_channels(v[0], v[1])),
    ));
    cases.push((
        "softmax cross-entropy",
        vec![randn(shape(4, 5, 1, 1), rng)],
        Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])),
    ));
    cases
}

/// Check every op on small random inputs.
pub fn op_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, build)| {
            Ok(OpCheck {
                name: name.to_string(),
                report: grad_check(&inputs, build, opts)?,
            })
        })
        .collect()
}

fn module_check(name: String, spec: HgcModuleSpec, rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<OpCheck> {
    let mut store = ParamStore::<f64>::new();
    let module = CompactModule::new(&mut store, rng, "m", spec)?;
    let x = randn(shape(3, spec.in_channels, 4, 4), rng);
    let report = grad_check_params(&store, &x, Mode::Train, |ctx, x| module.forward(ctx, x), opts)?;
    Ok(OpCheck { name, report })
}

/// Check the HGC, SGC and bottleneck modules (with and without SE) in train mode.
pub fn module_checks(seed: u64, opts: GradCheckOptions) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for variant in [Variant::Hgc, Variant::Sgc, Variant::Bottleneck] {
        for use_se in [false, true] {
            let spec = HgcModuleSpec::new(6, 4, 2, variant).with_se(use_se);
            let name = format!("{variant} module{}", if use_se { " + SE" } else { "" });
            out.push(module_check(name, spec, &mut rng, opts)?);
        }
    }
    let spec = HgcModuleSpec::new(6, 6, 3, Variant::Hgc);
    out.push(module_check("hgc module G=3".into(), spec, &mut rng, opts)?);
    Ok(out)
}

/// Spec of the small network used by [`network_check`].
pub fn gradcheck_network_spec() -> NetworkSpec {
    let mut spec = NetworkSpec::new(vec![StageSpec::new(2, 4), StageSpec::new(1, 8)], 2, Variant::Hgc);
    spec.stem_channels = 4;
    spec.image_size = 8;
    spec.num_classes = 3;
    spec
}

/// End-to-end check of logits plus cross-entropy on a two-stage network.
///
/// Runs with eval-mode batch norm: in train mode the head normalization makes
/// the loss nearly invariant to each module's output scale, and those
/// vanishing gradients only measure roundoff. Train-mode batch norm is
/// covered by [`module_checks`].
pub fn network_check(seed: u64, opts: GradCheckOptions) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = gradcheck_network_spec();
    spec.validate()?;
    let mut store = ParamStore::<f64>::new();
    let layout = NetworkLayout::build(&spec, &mut store, &mut rng)?;
    let x = randn(shape(3, 3, spec.image_size, spec.image_size), &mut rng);
    let labels = [0, 2, 1];
    let report = grad_check_params(
        &store,
        &x,
        Mode::Eval,
        |ctx, x| {
            let logits = layout.forward(ctx, x)?;
            ctx.tape.softmax_cross_entropy(logits, &labels)
        },
        opts,
    )?;
    Ok(OpCheck {
        name: "network logits + loss".into(),
        report,
    })
}

/// Options for [`module_checks`] and [`network_check`].
pub fn composite_options(tolerance: f64) -> GradCheckOptions {
    GradCheckOptions {
        step: COMPOSITE_STEP,
        tolerance,
        max_per_input: None,
    }
}

/// Ops (default step), modules and the end-to-end network
/// ([`COMPOSITE_STEP`]), in that order.
pub fn full_suite(seed: u64, tolerance: f64) -> Result<Vec<OpCheck>> {
    let ops = GradCheckOptions {
        tolerance,
        ..GradCheckOptions::default()
    };
    let mut out = op_checks(seed, ops)?;
    out.extend(module_checks(seed.wrapping_add(1), composite_options(tolerance))?);
    out.push(network_check(seed.wrapping_add(2), composite_options(tolerance))?);
    Ok(out)
}

/// Fixed-width table of check results.
pub fn format_table(checks: &[OpCheck]) -> String {
    let mut out = format!(
        "{:<30} {:>12} {:>8} {:>8}  status\n",
        "op", "max rel err", "checked", "skipped"
    );
    for c in checks {
        out.push_str(&format!(
            "{:<30} {:>12.3e} {:>8} {:>8}  {}\n",
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.report.skipped,
            if c.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}
