//! Static parameter and FLOP accounting. One FLOP is one multiply-accumulate.

use std::fmt::Write as _;

use super::{NetworkSpec, INPUT_CHANNELS};
use crate::blocks::{HgcModuleSpec, Variant};
use crate::error::Result;
use crate::hgc::{compression_ratio, hgc_param_count, HgcLayerSpec, Ratio};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    /// The module's 1x1 reduction.
    Reduce {
        variant: Variant,
        layer: HgcLayerSpec,
    },
    Depthwise,
    Pointwise,
    BatchNorm,
    SeFc,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub params: usize,
    pub flops: usize,
}

impl LayerRecord {
    fn new(name: String, kind: LayerKind, params: usize, spatial: usize) -> Self {
        Self {
            name,
            kind,
            params,
            flops: params * spatial,
        }
    }

    /// Parameter ratio of a 1x1 reduction to its dense `I * O` equivalent.
    pub fn dense_ratio(&self) -> Option<Ratio> {
        match self.kind {
            LayerKind::Reduce { layer, .. } => Some(Ratio::new(
                self.params as u64,
                (layer.in_channels * layer.out_channels) as u64,
            )),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub spec: NetworkSpec,
    pub records: Vec<LayerRecord>,
    pub total_params: usize,
    pub total_flops: usize,
}

impl ParamReport {
    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn mflops(&self) -> f64 {
        self.total_flops as f64 / 1e6
    }

    pub fn reduce_layers(&self) -> impl Iterator<Item = &LayerRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r.kind, LayerKind::Reduce { .. }))
    }

    /// Summed 1x1 reduction params over their dense equivalents.
    pub fn reduce_ratio(&self) -> Ratio {
        let (num, den) = self.reduce_layers().fold((0u64, 0u64), |(n, d), r| match r.kind {
            LayerKind::Reduce { layer, .. } => {
                (n + r.params as u64, d + (layer.in_channels * layer.out_channels) as u64)
            }
            _ => (n, d),
        });
        Ratio::new(num, den.max(1))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,flops\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.name, r.params, r.flops);
        }
        let _ = writeln!(out, "total,{},{}", self.total_params, self.total_flops);
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.records.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.spec);
        if let Some(p) = &self.spec.preset {
            let _ = writeln!(out, "# preset {p}: stage widths are calibrated");
        }
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>14}", "layer", "params", "flops");
        for r in &self.records {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>14}", r.name, r.params, r.flops);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>12}  {:>14}",
            "total", self.total_params, self.total_flops
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>11.3}M  {:>13.2}M",
            "",
            self.mparams(),
            self.mflops()
        );
        let _ = writeln!(out, "1x1 reduction ratio vs dense: {:.4}", self.reduce_ratio().to_f64());
        out
    }
}

/// Cost of a single 1x1 layer of the given variant on an `h x w` output.
pub fn analyze_layer(layer: HgcLayerSpec, variant: Variant, h: usize, w: usize) -> LayerRecord {
    let (i, o, g) = (layer.in_channels, layer.out_channels, layer.groups);
    let params = match variant {
        Variant::Hgc => hgc_param_count(layer),
        Variant::Sgc => i * o / g,
        Variant::Bottleneck => i * o,
    };
    LayerRecord::new(
        format!("{variant}({i},{o},{g})"),
        LayerKind::Reduce { variant, layer },
        params,
        h * w,
    )
}

fn module_records(name: &str, m: &HgcModuleSpec, spatial: usize, out: &mut Vec<LayerRecord>) {
    let (cin, w, g) = (m.in_channels, m.bottleneck_width, m.growth_rate);
    out.push(LayerRecord::new(
        format!("{name}.bn_in"),
        LayerKind::BatchNorm,
        2 * cin,
        spatial,
    ));
    let layer = HgcLayerSpec {
        in_channels: cin,
        out_channels: w,
        groups: m.reduce_groups(),
    };
    out.push(LayerRecord::new(
        format!("{name}.reduce"),
        LayerKind::Reduce {
            variant: m.variant,
            layer,
        },
        m.reduce_params(),
        spatial,
    ));
    out.push(LayerRecord::new(
        format!("{name}.bn_mid"),
        LayerKind::BatchNorm,
        2 * w,
        spatial,
    ));
    out.push(LayerRecord::new(
        format!("{name}.depthwise"),
        LayerKind::Depthwise,
        9 * w,
        spatial,
    ));
    out.push(LayerRecord::new(
        format!("{name}.pointwise"),
        LayerKind::Pointwise,
        w * g,
        spatial,
    ));
    out.push(LayerRecord::new(
        format!("{name}.bn_out"),
        LayerKind::BatchNorm,
        2 * g,
        spatial,
    ));
    if m.use_se {
        let hidden = g / m.se_reduction;
        out.push(LayerRecord::new(
            format!("{name}.se.fc1"),
            LayerKind::SeFc,
            g * hidden + hidden,
            1,
        ));
        out.push(LayerRecord::new(
            format!("{name}.se.fc2"),
            LayerKind::SeFc,
            hidden * g + g,
            1,
        ));
    }
}

/// Per-layer parameter and FLOP counts of a network spec.
pub fn analyze(spec: &NetworkSpec) -> Result<ParamReport> {
    spec.validate()?;
    let mut records = Vec::new();
    let full = spec.image_size * spec.image_size;
    records.push(LayerRecord::new(
        "stem".into(),
        LayerKind::Conv3x3,
        9 * INPUT_CHANNELS * spec.stem_channels,
        full,
    ));
    let mut last_size = spec.image_size;
    let mut counters = vec![0usize; spec.stages.len()];
    for (si, size, m) in spec.module_plan() {
        let k = counters[si];
        counters[si] += 1;
        module_records(&format!("stage{si}.module{k}"), &m, size * size, &mut records);
        last_size = size;
    }
    let feat = spec.feature_channels();
    records.push(LayerRecord::new(
        "head.bn".into(),
        LayerKind::BatchNorm,
        2 * feat,
        last_size * last_size,
    ));
    records.push(LayerRecord::new(
        "head.fc".into(),
        LayerKind::Linear,
        feat * spec.num_classes + spec.num_classes,
        1,
    ));
    let total_params = records.iter().map(|r| r.params).sum();
    let total_flops = records.iter().map(|r| r.flops).sum();
    Ok(ParamReport {
        spec: spec.clone(),
        records,
        total_params,
        total_flops,
    })
}

/// One row of a group sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantRow {
    pub variant: Variant,
    pub groups: usize,
    pub params: usize,
    pub flops: usize,
    pub report: ParamReport,
}

impl VariantRow {
    /// Whether every 1x1 reduction's ratio to dense equals the closed form.
    pub fn ratios_match_closed_form(&self) -> bool {
        self.report.reduce_layers().all(|r| match r.kind {
            LayerKind::Reduce {
                variant: Variant::Hgc,
                layer,
            } => r.dense_ratio() == Some(compression_ratio(layer).exact),
            _ => true,
        })
    }
}

/// HGC and SGC cost for each group count, in `groups` order.
pub fn compare_variants(base: &NetworkSpec, groups: &[usize]) -> Result<Vec<VariantRow>> {
    let mut rows = Vec::new();
    for &g in groups {
        for variant in [Variant::Hgc, Variant::Sgc] {
            let report = analyze(&base.with_groups(g).with_variant(variant))?;
            rows.push(VariantRow {
                variant,
                groups: g,
                params: report.total_params,
                flops: report.total_flops,
                report,
            });
        }
    }
    Ok(rows)
}

/// Comparison rows as CSV: `variant,groups,params,flops,mparams,mflops`.
pub fn comparison_csv(rows: &[VariantRow]) -> String {
    let mut out = String::from("variant,groups,params,flops,mparams,mflops\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.3}",
            r.variant,
            r.groups,
            r.params,
            r.flops,
            r.params as f64 / 1e6,
            r.flops as f64 / 1e6
        );
    }
    out
}
