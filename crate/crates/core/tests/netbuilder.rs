mod common;

use hgcnet::blocks::Variant;
use hgcnet::hgc::{compression_ratio, hgc_param_count, sgc_param_count, HgcLayerSpec};
use hgcnet::net::*;
use hgcnet::{Error, Shape4, Tensor};

const PRESETS: [&str; 3] = ["hgcnet-42", "hgcnet-67", "hgcnet-91"];
const TABLE_GROUPS: [usize; 4] = [1, 2, 4, 6];

#[test]
fn single_module_dense_concat() {
    let mut spec = NetworkSpec::new(vec![StageSpec::new(1, 8)], 1, Variant::Hgc);
    spec.stem_channels = 16;
    let plan = spec.module_plan();
    assert_eq!(plan.len(), 1);
    assert_eq!(plan[0].2.in_channels, 16);
    assert_eq!(spec.feature_channels(), 24);
    let net = Network::<f32>::new(spec, 0).unwrap();
    let fc = net.store().param(net.layout().fc_w);
    assert_eq!(fc.value.shape(), Shape4::new(10, 24, 1, 1));
}

#[test]
fn dense_connectivity_widths() {
    for name in PRESETS {
        let spec = NetworkSpec::preset(name, 4, Variant::Hgc).unwrap();
        let mut stage_in = spec.stem_channels;
        let plan = spec.module_plan();
        let mut idx = 0;
        for st in &spec.stages {
            for k in 0..st.num_modules {
                assert_eq!(
                    plan[idx].2.in_channels,
                    stage_in + k * st.growth_rate,
                    "{name} module {idx}"
                );
                assert_eq!(plan[idx].2.growth_rate, st.growth_rate);
                idx += 1;
            }
            stage_in += st.num_modules * st.growth_rate;
        }
        assert_eq!(stage_in, spec.feature_channels());
    }
}

#[test]
fn presets_build_at_table_group_counts() {
    for name in PRESETS {
        for g in TABLE_GROUPS {
            for variant in [Variant::Hgc, Variant::Sgc] {
                let spec = NetworkSpec::preset(name, g, variant).unwrap();
                spec.validate()
                    .unwrap_or_else(|e| panic!("{name} G={g} {variant}: {e}"));
            }
        }
    }
    assert_eq!(
        NetworkSpec::preset("hgcnet-42", 1, Variant::Hgc).unwrap().num_modules(),
        13
    );
    assert!(NetworkSpec::preset("hgcnet-50", 1, Variant::Hgc)
        .unwrap_err()
        .is_config());
}

#[test]
fn divisibility_failure_names_module() {
    let mut spec = NetworkSpec::new(vec![StageSpec::new(3, 6)], 4, Variant::Hgc);
    spec.stem_channels = 16;
    // Module inputs are 16, 22, 28: the second is not divisible by 4.
    match spec.validate().unwrap_err() {
        Error::Module { index, .. } => assert_eq!(index, 1),
        other => panic!("unexpected {other}"),
    }
    let mut doubling = NetworkSpec::new(vec![StageSpec::new(1, 8), StageSpec::new(1, 12)], 1, Variant::Hgc);
    assert!(doubling.validate().unwrap_err().is_config());
    doubling.stages[1].growth_rate = 16;
    doubling.validate().unwrap();
}

#[test]
fn tiny_forward_logits() {
    let net = Network::<f32>::new(NetworkSpec::tiny(2, Variant::Hgc), 1).unwrap();
    let x = Tensor::<f32>::randn(Shape4::new(2, 3, 32, 32), 1.0, &mut common::rng(2));
    let logits = net.logits(&x).unwrap();
    assert_eq!(logits.shape(), Shape4::new(2, 10, 1, 1));
    assert!(logits.is_finite());
}

#[test]
fn every_preset_and_group_count_gives_finite_logits() {
    let x = Tensor::<f32>::randn(Shape4::new(1, 3, 32, 32), 1.0, &mut common::rng(3));
    for name in PRESETS {
        for g in TABLE_GROUPS {
            let net = Network::<f32>::new(NetworkSpec::preset(name, g, Variant::Hgc).unwrap(), g as u64).unwrap();
            let logits = net.logits(&x).unwrap();
            assert_eq!(logits.shape(), Shape4::new(1, 10, 1, 1));
            assert!(logits.is_finite(), "{name} G={g}");
        }
    }
}

fn analyzed_specs() -> Vec<NetworkSpec> {
    let mut out = Vec::new();
    for variant in [Variant::Hgc, Variant::Sgc, Variant::Bottleneck] {
        for g in [1, 2, 4] {
            for se in [false, true] {
                let mut s = NetworkSpec::preset("hgcnet-42", g, variant).unwrap();
                s.use_se = se;
                out.push(s);
                let mut t = NetworkSpec::new(vec![StageSpec::new(2, 8), StageSpec::new(1, 16)], g, variant);
                t.use_se = se;
                t.num_classes = 100;
                out.push(t);
            }
        }
    }
    out
}

#[test]
fn analysis_equals_instantiated_weights() {
    for spec in analyzed_specs() {
        let report = analyze(&spec).unwrap();
        let net = Network::<f32>::new(spec.clone(), 0).unwrap();
        let enumerated: usize = net.store().params().iter().map(|p| p.value.data().len()).sum();
        assert_eq!(report.total_params, enumerated, "{spec}");
        assert_eq!(
            report.total_params,
            report.records.iter().map(|r| r.params).sum::<usize>()
        );
        assert_eq!(
            report.total_flops,
            report.records.iter().map(|r| r.flops).sum::<usize>()
        );
    }
}

#[test]
fn single_layer_costs() {
    let dense = analyze_layer(HgcLayerSpec::new(16, 16, 1).unwrap(), Variant::Bottleneck, 32, 32);
    assert_eq!((dense.params, dense.flops), (256, 262_144));
    let hgc = analyze_layer(HgcLayerSpec::new(16, 16, 4).unwrap(), Variant::Hgc, 32, 32);
    assert_eq!((hgc.params, hgc.flops), (112, 112 * 1024));
    let sgc = analyze_layer(HgcLayerSpec::new(16, 16, 4).unwrap(), Variant::Sgc, 8, 8);
    assert_eq!((sgc.params, sgc.flops), (64, 64 * 64));
}

#[test]
fn hgcnet42_g4_params_near_reported_size() {
    let report = analyze(&NetworkSpec::preset("hgcnet-42", 4, Variant::Hgc).unwrap()).unwrap();
    let rel = (report.mparams() - 0.28).abs() / 0.28;
    assert!(rel <= 0.15, "{} M params", report.mparams());
}

#[test]
fn group_sweep_shape() {
    let base = NetworkSpec::preset("hgcnet-42", 1, Variant::Hgc).unwrap();
    let rows = compare_variants(&base, &[1, 2, 4, 6]).unwrap();
    let dense = analyze(&base.with_variant(Variant::Bottleneck)).unwrap();
    let get = |v: Variant, g: usize| rows.iter().find(|r| r.variant == v && r.groups == g).unwrap();
    assert_eq!(get(Variant::Hgc, 1).params, dense.total_params);
    assert_eq!(get(Variant::Sgc, 1).params, dense.total_params);
    assert_eq!(get(Variant::Hgc, 1).flops, dense.total_flops);
    for v in [Variant::Hgc, Variant::Sgc] {
        for w in [1, 2, 4, 6].windows(2) {
            assert!(get(v, w[0]).params > get(v, w[1]).params, "{v} params G={w:?}");
            assert!(get(v, w[0]).flops > get(v, w[1]).flops, "{v} flops G={w:?}");
        }
    }
    for g in [1, 2, 4, 6] {
        assert!(get(Variant::Hgc, g).params >= get(Variant::Sgc, g).params);
        assert!(get(Variant::Hgc, g).ratios_match_closed_form());
    }
    let csv = comparison_csv(&rows);
    assert_eq!(csv.lines().count(), 1 + rows.len());
    assert!(csv.starts_with("variant,groups,params,flops"));
}

#[test]
fn per_layer_ratios() {
    let base = NetworkSpec::preset("hgcnet-42", 4, Variant::Hgc).unwrap();
    let hgc = analyze(&base).unwrap();
    let sgc = analyze(&base.with_variant(Variant::Sgc)).unwrap();
    let pairs: Vec<_> = hgc.reduce_layers().zip(sgc.reduce_layers()).collect();
    assert_eq!(pairs.len(), base.num_modules());
    for (h, s) in pairs {
        let LayerKind::Reduce { layer, .. } = h.kind else {
            unreachable!()
        };
        assert_eq!(h.dense_ratio(), Some(compression_ratio(layer).exact));
        assert_eq!(h.params, hgc_param_count(layer));
        assert_eq!(s.params, sgc_param_count(layer));
        // SGC keeps I*O/G weights; cross-multiplied so the check stays exact.
        assert_eq!(
            h.params * layer.in_channels * layer.out_channels / layer.groups,
            s.params * hgc_param_count(layer)
        );
    }
}

#[test]
fn wide_layers_reach_the_approximation() {
    for g in [2, 4, 8] {
        let rec = analyze_layer(HgcLayerSpec::new(256, 256, g).unwrap(), Variant::Hgc, 1, 1);
        let approx = compression_ratio(HgcLayerSpec::new(256, 256, g).unwrap()).approx;
        assert!((rec.dense_ratio().unwrap().to_f64() - approx).abs() < 0.02);
        let gf = g as f64;
        assert!((approx - ((2.0 / gf) * (1.0 - 1.0 / gf) + 1.0 / (gf * gf))).abs() < 1e-15);
    }
}

#[test]
fn spec_file_and_report_formats() {
    let spec = NetworkSpec::from_text("variant=hgc\ngroups=4\nstages=4x8,4x16,5x32\nse=false\nclasses=10\n").unwrap();
    assert_eq!(spec.num_modules(), 13);
    let report = analyze(&spec).unwrap();
    let csv = report.to_csv();
    assert!(csv.starts_with("layer,params,flops\n"));
    assert!(csv
        .trim_end()
        .ends_with(&format!("total,{},{}", report.total_params, report.total_flops)));
    assert!(!report.to_table().contains("calibrated"));
    let preset = analyze(&NetworkSpec::preset("hgcnet-42", 4, Variant::Hgc).unwrap()).unwrap();
    assert!(preset.to_table().contains("calibrated"));
}

#[test]
fn depth_accounting() {
    let spec = NetworkSpec::from_text("stages=4x8,4x16,5x32").unwrap();
    assert_eq!(spec.depth(), 41);
    assert_eq!(NetworkSpec::tiny(1, Variant::Hgc).depth(), 8);
}
