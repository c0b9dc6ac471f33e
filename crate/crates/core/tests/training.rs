mod common;

use hgcnet::blocks::Variant;
use hgcnet::data::{synth_dataset, Dataset};
use hgcnet::net::{Network, NetworkSpec};
use hgcnet::parallel;
use hgcnet::tensor::param::ParamStore;
use hgcnet::train::*;
use hgcnet::{Error, Shape4, Tensor};
use rand::Rng;

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn small_set() -> Dataset {
    synth_dataset(4, 48, 10, 1.0).unwrap()
}

#[test]
fn cosine_schedule_shape() {
    for epochs in [2, 30, 300, 301] {
        let cfg = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 0.1);
        let last = cosine_lr(epochs - 1, &cfg).unwrap();
        let pi_over = std::f64::consts::PI / epochs as f64;
        assert!(last < 0.1 * pi_over * pi_over / 4.0 + 1e-12, "epochs {epochs}: {last}");
        if epochs % 2 == 0 {
            assert!((cosine_lr(epochs / 2, &cfg).unwrap() - 0.05).abs() < 1e-15);
        }
        let lrs: Vec<f64> = (0..epochs).map(|e| cosine_lr(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| l > 0.0));
        assert!(cosine_lr(epochs, &cfg).is_err());
    }
}

fn scalar_store(x: f64, decay: bool) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.add("x", Tensor::full(Shape4::new(1, 1, 1, 1), x), decay);
    store
}

fn value(store: &ParamStore<f64>) -> f64 {
    store.params()[0].value.data()[0]
}

#[test]
fn nesterov_on_quadratic_matches_hand_iteration() {
    // f(x) = x^2 / 2, x0 = 1, lr = 0.1, mu = 0.9:
    // step 1: g = 1,    v = 1,              x = 1 - 0.1 * (1 + 0.9)           = 0.81
    // step 2: g = 0.81, v = 0.9 + 0.81 = 1.71, x = 0.81 - 0.1 * (0.81 + 1.539) = 0.5751
    let expected = [0.81, 0.5751];
    let mut store = scalar_store(1.0, true);
    let mut v = zero_velocity(&store);
    for want in expected {
        let x = value(&store);
        store.params_mut()[0].grad = Tensor::full(Shape4::new(1, 1, 1, 1), x);
        sgd_nesterov_step(&mut store, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((value(&store) - want).abs() < 1e-7, "{} vs {want}", value(&store));
    }
    assert!((v[0].data()[0] - 1.71).abs() < 1e-12);
}

#[test]
fn decay_only_step() {
    let (lr, wd, mu) = (0.1, 1e-4, 0.9);
    let mut store = scalar_store(2.0, true);
    let mut v = zero_velocity(&store);
    sgd_nesterov_step(&mut store, &mut v, lr, mu, wd).unwrap();
    assert!((value(&store) - 2.0 * (1.0 - lr * wd * (1.0 + mu))).abs() < 1e-15);

    let mut untagged = scalar_store(2.0, false);
    let mut v = zero_velocity(&untagged);
    sgd_nesterov_step(&mut untagged, &mut v, lr, mu, wd).unwrap();
    assert_eq!(value(&untagged), 2.0);
}

#[test]
fn zero_lr_is_bit_identical() {
    let ds = small_set();
    let mut net = Network::<f32>::new(NetworkSpec::tiny(2, Variant::Hgc), 1).unwrap();
    let (x, labels) = ds.batch(&(0..8).collect::<Vec<_>>());
    net.train_step(&x, &labels).unwrap();
    let before: Vec<_> = net.store().params().iter().map(|p| p.value.clone()).collect();
    let mut v = zero_velocity(net.store());
    sgd_nesterov_step(net.store_mut(), &mut v, 0.0, 0.9, 1e-4).unwrap();
    for (p, b) in net.store().params().iter().zip(&before) {
        assert_eq!(p.value.data(), b.data(), "{}", p.name);
    }
}

#[test]
fn bn_and_bias_params_are_not_decayed() {
    let mut spec = NetworkSpec::tiny(2, Variant::Hgc);
    spec.use_se = true;
    let mut net = Network::<f32>::new(spec, 1).unwrap();
    let mut tagged = 0;
    for p in net.store().params() {
        let affine = p.name.ends_with(".gamma") || p.name.ends_with(".beta") || p.name.ends_with(".bias");
        assert_eq!(p.decay, !affine, "{}", p.name);
        tagged += p.decay as usize;
    }
    assert!(tagged > 0);
    let before: Vec<_> = net.store().params().iter().map(|p| p.value.clone()).collect();
    let mut v = zero_velocity(net.store());
    // Gradients are zero, so only decay-tagged params can move.
    sgd_nesterov_step(net.store_mut(), &mut v, 0.1, 0.9, 0.5).unwrap();
    for (p, b) in net.store().params().iter().zip(&before) {
        let moved = p.value.data() != b.data();
        let nonzero = b.data().iter().any(|&w| w != 0.0);
        assert_eq!(moved, p.decay && nonzero, "{}", p.name);
    }
}

#[test]
fn augment_draw_statistics() {
    const DRAWS: usize = 10_000;
    // Upper 0.1% tail of chi-square with 8 degrees of freedom.
    const CHI2_CRIT: f64 = 26.12;
    let mut rng = common::rng(2024);
    let mut flips = 0usize;
    let (mut dy, mut dx) = ([0usize; OFFSETS], [0usize; OFFSETS]);
    for _ in 0..DRAWS {
        let d = AugmentDraw::sample(&mut rng);
        flips += d.flip as usize;
        dy[d.dy] += 1;
        dx[d.dx] += 1;
    }
    let rate = flips as f64 / DRAWS as f64;
    assert!((0.48..=0.52).contains(&rate), "flip rate {rate}");
    let expected = DRAWS as f64 / OFFSETS as f64;
    for counts in [dy, dx] {
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CHI2_CRIT, "chi2 {chi2} over {counts:?}");
    }
}

#[test]
fn batch_augmentation_uses_one_draw_per_sample() {
    let x = Tensor::<f32>::randn(Shape4::new(4, 3, 32, 32), 1.0, &mut common::rng(5));
    let mut rng = common::rng(6);
    let mut replay = rng.clone();
    let mut batch = x.clone();
    augment_batch(&mut batch, &mut rng).unwrap();
    for n in 0..4 {
        let d = AugmentDraw::sample(&mut replay);
        let (one, _) = Dataset::new(x.clone(), vec![0; 4], 1, hgcnet::data::Split::Train)
            .unwrap()
            .batch(&[n]);
        assert_eq!(augment_with(&one, d).unwrap().data(), batch.sample(n));
    }
    assert_eq!(rng.random::<u64>(), replay.random::<u64>());
}

#[test]
fn augmentation_zero_pads_in_normalized_space() {
    let ds = small_set();
    let norm = Normalizer::fit(&ds);
    let (mut x, _) = ds.batch(&[0]);
    norm.apply(&mut x);
    let y = augment_with(
        &x,
        AugmentDraw {
            dy: 0,
            dx: 0,
            flip: false,
        },
    )
    .unwrap();
    for c in 0..3 {
        assert!((0..32).all(|i| y.at(0, c, 0, i) == 0.0 && y.at(0, c, i, 0) == 0.0));
        assert_eq!(y.at(0, c, 4, 4), x.at(0, c, 0, 0));
    }
}

#[test]
fn evaluation_is_side_effect_free() {
    let ds = small_set();
    let mut trainer = Trainer::new(NetworkSpec::tiny(2, Variant::Hgc), small_cfg(2), &ds).unwrap();
    trainer.run_epoch(&ds, None).unwrap();
    let snapshot = trainer.net.store().clone();
    let a = trainer.evaluate(&ds).unwrap();
    let b = trainer.evaluate(&ds).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.top1_error.to_bits(), b.top1_error.to_bits());
    assert_eq!(trainer.net.store().params(), snapshot.params());
    assert_eq!(trainer.net.store().stats(), snapshot.stats());
    assert!((0.0..=100.0).contains(&a.top1_error) && a.loss >= 0.0);
}

#[test]
fn seeded_runs_are_bit_identical() {
    parallel::set_sequential(true);
    let ds = small_set();
    let run = || {
        let mut t = Trainer::new(NetworkSpec::tiny(2, Variant::Hgc), small_cfg(2), &ds).unwrap();
        t.fit(&ds, Some(&ds), None).unwrap().clone()
    };
    let (a, b) = (run(), run());
    parallel::set_sequential(false);
    assert!(a.same_values(&b));
    assert_eq!(a.records.len(), 2);
    for r in &a.records {
        assert!((0.0..=100.0).contains(&r.train_top1) && r.train_loss >= 0.0);
    }
}

#[test]
fn metrics_csv_is_flushed_per_epoch() {
    let ds = small_set();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let mut t = Trainer::new(NetworkSpec::tiny(2, Variant::Hgc), small_cfg(3), &ds).unwrap();
    t.fit_until(1, &ds, Some(&ds), Some(&path)).unwrap();
    let first = std::fs::read_to_string(&path).unwrap();
    assert_eq!(first.lines().next(), Some(EpochRecord::CSV_HEADER));
    assert_eq!(first.lines().count(), 2);
    t.fit(&ds, Some(&ds), Some(&path)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with(&first));
    assert_eq!(text, t.metrics().to_csv());
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let ds = small_set();
    let cfg = TrainConfig {
        divergence_factor: 1e-6,
        divergence_patience: 2,
        ..small_cfg(5)
    };
    let mut t = Trainer::new(NetworkSpec::tiny(2, Variant::Hgc), cfg, &ds).unwrap();
    match t.fit(&ds, None, None).unwrap_err() {
        Error::Diverged(msg) => assert!(msg.contains("epoch 1"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(t.epoch(), 1);
}

#[test]
fn chance_level_head() {
    let ds = synth_dataset(9, 200, 10, 0.5).unwrap();
    let mut net = Network::<f32>::new(NetworkSpec::tiny(2, Variant::Hgc), 0).unwrap();
    let (w, b) = (net.layout().fc_w, net.layout().fc_b);
    let ws = net.store().param(w).value.shape();
    net.store_mut().param_mut(w).value = Tensor::zeros(ws);
    let mut bias = Tensor::zeros(Shape4::new(1, 10, 1, 1));
    bias.data_mut()[0] = 3.0;
    net.store_mut().param_mut(b).value = bias;
    let r = evaluate_top1(&net, &ds, &Normalizer::identity(), 64).unwrap();
    assert_eq!(r.top1_error, 90.0);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let d = TrainConfig::default();
    assert_eq!(
        (d.batch_size, d.epochs, d.base_lr, d.momentum, d.weight_decay),
        (128, 300, 0.1, 0.9, 1e-4)
    );
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..d.clone()
        },
        TrainConfig {
            base_lr: 0.0,
            ..d.clone()
        },
        TrainConfig {
            momentum: 1.0,
            ..d.clone()
        },
        TrainConfig {
            weight_decay: -1.0,
            ..d.clone()
        },
    ] {
        assert!(bad.validate().unwrap_err().is_config());
    }
    let mut c = TrainConfig::default();
    c.set("epochs", "30").unwrap();
    c.set("lr", "0.05").unwrap();
    assert_eq!((c.epochs, c.base_lr), (30, 0.05));
    assert!(c.set("epochs", "x").unwrap_err().is_config());
    assert!(c.set("nope", "1").unwrap_err().is_config());
}
