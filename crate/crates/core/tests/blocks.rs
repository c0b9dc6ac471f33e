mod common;

use common::*;
use hgcnet::blocks::*;
use hgcnet::hgc::{hgc_param_count, sgc_param_count, HgcLayerSpec};
use hgcnet::net::{analyze, NetworkSpec};
use hgcnet::tensor::autodiff::Tape;
use hgcnet::tensor::ops::{Mode, BN_EPS};
use hgcnet::tensor::param::ParamStore;
use hgcnet::{Shape4, Tensor};

fn build(spec: HgcModuleSpec, seed: u64) -> (ParamStore<f64>, CompactModule) {
    let mut store = ParamStore::new();
    let m = CompactModule::new(&mut store, &mut rng(seed), "m", spec).unwrap();
    (store, m)
}

/// Copy every parameter of `src` into `dst` position by position.
fn share_weights(src: &ParamStore<f64>, dst: &mut ParamStore<f64>) {
    assert_eq!(src.params().len(), dst.params().len());
    for (d, s) in dst.params_mut().iter_mut().zip(src.params()) {
        assert_eq!(d.value.shape(), s.value.shape(), "{} vs {}", d.name, s.name);
        d.value = s.value.clone();
    }
}

#[test]
fn output_shape_contract() {
    let spec = HgcModuleSpec::new(24, 8, 2, Variant::Hgc);
    let mut store = ParamStore::<f32>::new();
    let m = CompactModule::new(&mut store, &mut rng(1), "m", spec).unwrap();
    let x = Tensor::<f32>::randn(Shape4::new(2, 24, 32, 32), 1.0, &mut rng(2));
    let y = module_forward(&mut store, &m, &x, Mode::Train).unwrap();
    assert_eq!(y.shape(), Shape4::new(2, 8, 32, 32));
    assert!(y.is_finite());
}

#[test]
fn single_group_variants_equal_bottleneck() {
    let x: Tensor<f64> = randn(Shape4::new(3, 6, 4, 4), &mut rng(3));
    let (mut bstore, bottleneck) = build(HgcModuleSpec::new(6, 4, 1, Variant::Bottleneck), 4);
    let want = module_forward(&mut bstore.clone(), &bottleneck, &x, Mode::Train).unwrap();
    for variant in [Variant::Hgc, Variant::Sgc] {
        let (mut store, m) = build(HgcModuleSpec::new(6, 4, 1, variant), 5);
        share_weights(&bstore, &mut store);
        let got = module_forward(&mut store, &m, &x, Mode::Train).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-5, "{variant}");
    }
    let _ = module_forward(&mut bstore, &bottleneck, &x, Mode::Eval).unwrap();
}

fn bn_params(store: &ParamStore<f64>, bn: &BatchNorm) -> (Vec<f64>, Vec<f64>) {
    (
        store.param(bn.gamma).value.data().to_vec(),
        store.param(bn.beta).value.data().to_vec(),
    )
}

/// The module pipeline rebuilt from the naive oracles.
fn naive_module(store: &ParamStore<f64>, m: &CompactModule, x: &Tensor<f64>) -> Tensor<f64> {
    let (g, b) = bn_params(store, &m.bn_in);
    let mut h = naive_relu(&naive_batchnorm_train(x, &g, &b, BN_EPS));
    if let Some(groups) = m.shuffle_groups {
        h = naive_shuffle(&h, groups);
    }
    let reduced = match &m.reduce {
        Reduce::Dense(w) => naive_conv(&h, &store.param(*w).value, 1, 1, 0),
        Reduce::Group { w, groups } => naive_conv(&h, &store.param(*w).value, *groups, 1, 0),
        Reduce::Hgc { spec, blocks } => {
            let rows: Vec<Vec<f64>> = blocks.iter().map(|b| store.param(*b).value.data().to_vec()).collect();
            eq1_oracle(&h, &rows, spec.out_channels)
        }
    };
    let (g, b) = bn_params(store, &m.bn_mid);
    let h = naive_batchnorm_train(&reduced, &g, &b, BN_EPS);
    let h = naive_conv(&h, &store.param(m.depthwise).value, h.shape().c, 1, 1);
    let h = naive_conv(&h, &store.param(m.pointwise).value, 1, 1, 0);
    let (g, b) = bn_params(store, &m.bn_out);
    let out = naive_relu(&naive_batchnorm_train(&h, &g, &b, BN_EPS));
    match &m.se {
        None => out,
        Some(se) => naive_se(
            &out,
            &store.param(se.fc1_w).value,
            store.param(se.fc1_b).value.data(),
            &store.param(se.fc2_w).value,
            store.param(se.fc2_b).value.data(),
        ),
    }
}

#[test]
fn modules_match_composed_oracle() {
    let mut seed = 10;
    for variant in [Variant::Bottleneck, Variant::Sgc, Variant::Hgc] {
        for groups in [1, 2, 4] {
            for use_se in [false, true] {
                seed += 1;
                let spec = HgcModuleSpec::new(8, 4, groups, variant).with_se(use_se);
                let (mut store, m) = build(spec, seed);
                // Non-trivial affine parameters.
                for p in store.params_mut() {
                    if p.name.ends_with("beta") || p.name.ends_with("bias") {
                        p.value = p.value.map(|_| 0.1);
                    }
                }
                let x: Tensor<f64> = randn(Shape4::new(2, 8, 5, 5), &mut rng(seed + 100));
                let want = naive_module(&store, &m, &x);
                let got = module_forward(&mut store, &m, &x, Mode::Train).unwrap();
                assert!(max_abs_diff(&got, &want) < 1e-5, "{variant} G={groups} se={use_se}");
            }
        }
    }
}

#[test]
fn no_relu_before_depthwise() {
    // With bn_mid's shift far below zero every depthwise input is negative; a
    // ReLU there would zero the branch and make the output constant.
    let (mut store, m) = build(HgcModuleSpec::new(4, 4, 2, Variant::Hgc), 20);
    store.param_mut(m.bn_mid.beta).value = Tensor::full(Shape4::new(1, 16, 1, 1), -50.0);
    let x: Tensor<f64> = randn(Shape4::new(2, 4, 4, 4), &mut rng(21));
    let y = module_forward(&mut store, &m, &x, Mode::Train).unwrap();
    assert!(y.data().iter().any(|&v| v > 0.0));
    let first = y.data()[0];
    assert!(y.data().iter().any(|&v| v != first));
}

#[test]
fn sgc_reduction_keeps_groups_isolated() {
    let g = 4;
    let (mut store, m) = build(HgcModuleSpec::new(8, 4, g, Variant::Sgc), 30);
    let (mut hstore, hm) = build(HgcModuleSpec::new(8, 4, g, Variant::Hgc), 31);
    let x: Tensor<f64> = randn(Shape4::new(2, 8, 3, 3), &mut rng(32));
    let reduced = |store: &mut ParamStore<f64>, m: &CompactModule, x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut ctx = store.ctx(&mut tape, Mode::Eval);
        let xv = ctx.tape.leaf(x.clone());
        let t = m.forward_traced(&mut ctx, xv).unwrap();
        drop(ctx);
        tape.value(t.reduced).clone()
    };
    let base = reduced(&mut store, &m, &x);
    let hbase = reduced(&mut hstore, &hm, &x);
    let width = 16;
    let (in_g, out_g) = (8 / g, width / g);
    for c in 0..8 {
        let mut xp = x.clone();
        for n in 0..2 {
            for v in &mut xp.sample_mut(n)[c * 9..(c + 1) * 9] {
                *v += 3.0;
            }
        }
        // After the shuffle, input channel c sits at position k with
        // shuffle_source(k) == c.
        let k = (0..8)
            .find(|&k| hgcnet::tensor::ops::shuffle_source(k, 8, g) == c)
            .unwrap();
        let j = k / in_g;
        let after = reduced(&mut store, &m, &xp);
        let hafter = reduced(&mut hstore, &hm, &xp);
        for i in 0..g {
            let range = i * out_g..(i + 1) * out_g;
            assert_eq!(
                !channels_equal(&base, &after, range.clone()),
                i == j,
                "sgc channel {c} group {i}"
            );
            assert_eq!(
                !channels_equal(&hbase, &hafter, range),
                i >= j,
                "hgc channel {c} group {i}"
            );
        }
    }
}

#[test]
fn se_gate_examples() {
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, &mut rng(40), "se", 8, 4).unwrap();
    let x: Tensor<f64> = randn(Shape4::new(2, 8, 3, 3), &mut rng(41));

    let mut zeroed = store.clone();
    zeroed.param_mut(se.fc2_w).value = Tensor::zeros(Shape4::new(8, 2, 1, 1));
    assert_eq!(se_forward(&zeroed, &se, &x).unwrap(), x.map(|v| v * 0.5));

    let mut saturated = store.clone();
    saturated.param_mut(se.fc2_b).value = Tensor::full(Shape4::new(1, 8, 1, 1), 30.0);
    assert!(max_abs_diff(&se_forward(&saturated, &se, &x).unwrap(), &x) < 1e-3);

    let want = naive_se(
        &x,
        &store.param(se.fc1_w).value,
        store.param(se.fc1_b).value.data(),
        &store.param(se.fc2_w).value,
        store.param(se.fc2_b).value.data(),
    );
    assert!(max_abs_diff(&se_forward(&store, &se, &x).unwrap(), &want) < 1e-5);

    let mut tape = Tape::new();
    let mut ctx = store.eval_ctx(&mut tape);
    let xv = ctx.tape.leaf(x.clone());
    let (_, gate) = se.forward_gate(&mut ctx, xv).unwrap();
    drop(ctx);
    assert!(tape.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));

    assert!(se_forward(&store, &se, &Tensor::zeros(Shape4::new(1, 6, 2, 2))).is_err());
    assert!(SeBlock::new(&mut ParamStore::<f64>::new(), &mut rng(0), "se", 6, 4).is_err());
}

#[test]
fn invalid_specs_rejected_at_construction() {
    let mut store = ParamStore::<f32>::new();
    for spec in [
        HgcModuleSpec::new(6, 8, 4, Variant::Hgc),
        HgcModuleSpec::new(6, 8, 4, Variant::Sgc),
        HgcModuleSpec::new(6, 5, 3, Variant::Hgc),
        HgcModuleSpec::new(8, 0, 1, Variant::Hgc),
        HgcModuleSpec::new(8, 4, 0, Variant::Sgc),
        HgcModuleSpec::new(8, 6, 1, Variant::Hgc).with_se(true),
    ] {
        assert!(
            CompactModule::new(&mut store, &mut rng(0), "m", spec).is_err(),
            "{spec:?}"
        );
    }
    // The dense bottleneck ignores the group count.
    assert!(CompactModule::new(
        &mut store,
        &mut rng(0),
        "m",
        HgcModuleSpec::new(6, 8, 4, Variant::Bottleneck)
    )
    .is_ok());
}

#[test]
fn sgc_reduction_saves_exactly_the_cross_group_weights() {
    for (cin, g) in [(8, 2), (16, 4), (24, 4), (12, 6)] {
        let growth = 2 * g;
        let hgc = HgcModuleSpec::new(cin, growth, g, Variant::Hgc);
        let sgc = HgcModuleSpec::new(cin, growth, g, Variant::Sgc);
        let width = hgc.bottleneck_width;
        assert_eq!(
            hgc.reduce_params() - sgc.reduce_params(),
            (g - 1) * width * width / (g * g)
        );
        let layer = HgcLayerSpec::new(cin, width, g).unwrap();
        assert_eq!(hgc.reduce_params(), hgc_param_count(layer));
        assert_eq!(sgc.reduce_params(), sgc_param_count(layer));
    }
}

#[test]
fn param_ordering_sgc_hgc_bottleneck() {
    for groups in [2, 4, 6] {
        let base = NetworkSpec::preset("hgcnet-42", groups, Variant::Hgc).unwrap();
        let total = |v: Variant| analyze(&base.with_variant(v)).unwrap().total_params;
        let (s, h, b) = (total(Variant::Sgc), total(Variant::Hgc), total(Variant::Bottleneck));
        assert!(s < h && h < b, "G={groups}: {s} {h} {b}");
    }
    let spec = |v| HgcModuleSpec::new(24, 12, 4, v);
    let count = |v| build(spec(v), 0).1.param_count();
    assert!(count(Variant::Sgc) < count(Variant::Hgc));
    assert!(count(Variant::Hgc) < count(Variant::Bottleneck));
}

#[test]
fn module_param_count_matches_store() {
    for variant in [Variant::Bottleneck, Variant::Sgc, Variant::Hgc] {
        for use_se in [false, true] {
            let (store, m) = build(HgcModuleSpec::new(12, 8, 2, variant).with_se(use_se), 50);
            assert_eq!(m.param_count(), store.scalar_count());
        }
    }
}
