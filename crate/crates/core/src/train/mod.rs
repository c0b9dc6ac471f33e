//! Training protocol: SGD with Nesterov momentum, cosine schedule,
//! augmentation, evaluation and resumable runs.

mod augment;

pub use augment::{augment, augment_batch, augment_with, AugmentDraw, CROP, OFFSETS, PAD};

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{synth_dataset, Blob, Checkpoint, Dataset, RngState};
use crate::error::{Error, Result};
use crate::net::config::{parse_bool, parse_usize};
use crate::net::{Network, NetworkSpec};
use crate::tensor::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate on the validation set every this many epochs (and at the end).
    pub eval_every: usize,
    pub augment: bool,
    /// Abort when the epoch loss exceeds `divergence_factor` times the
    /// initial loss for `divergence_patience` consecutive epochs.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 300,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            eval_every: 1,
            augment: true,
            divergence_factor: 10.0,
            divergence_patience: 3,
        }
    }
}

/// Synthetic training set used by desk-scale runs.
pub const DESK_SAMPLES: usize = 512;
pub const DESK_CLASSES: usize = 10;
pub const DESK_DIFFICULTY: f64 = 1.0;

pub fn desk_dataset(seed: u64) -> Result<Dataset> {
    synth_dataset(seed, DESK_SAMPLES, DESK_CLASSES, DESK_DIFFICULTY)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got '{value}'")))
}

impl TrainConfig {
    /// Scaled-down run length for CPU experiments.
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 || self.divergence_patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs, eval_every and divergence_patience must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "lr" | "base_lr" => self.base_lr = parse_f64(key, value)?,
            "momentum" => self.momentum = parse_f64(key, value)?,
            "weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: expected an integer, got '{value}'")))?
            }
            "eval_every" => self.eval_every = parse_usize(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "divergence_factor" => self.divergence_factor = parse_f64(key, value)?,
            "divergence_patience" => self.divergence_patience = parse_usize(key, value)?,
            other => return Err(Error::Config(format!("unknown train key '{other}'"))),
        }
        Ok(())
    }
}

/// `0.5 * base_lr * (1 + cos(pi * epoch / epochs))`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    let t = epoch as f64 / cfg.epochs as f64;
    Ok(0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub fn zero_velocity<S: Scalar>(store: &ParamStore<S>) -> Vec<Tensor<S>> {
    store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

/// One Nesterov step over every parameter:
/// `g = grad + wd * p` (decay-tagged params only), `v = mu * v + g`,
/// `p -= lr * (g + mu * v)`.
///
/// Any non-finite gradient aborts before a single parameter is touched.
pub fn sgd_nesterov_step<S: Scalar>(
    store: &mut ParamStore<S>,
    velocity: &mut [Tensor<S>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if velocity.len() != store.params().len() {
        return Err(Error::invalid(
            "sgd",
            format!(
                "{} velocity buffers for {} parameters",
                velocity.len(),
                store.params().len()
            ),
        ));
    }
    if let Some(p) = store.params().iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    let (lr, mu) = (S::lit(lr), S::lit(momentum));
    for (p, v) in store.params_mut().iter_mut().zip(velocity.iter_mut()) {
        let wd = if p.decay { S::lit(weight_decay) } else { S::zero() };
        let grads = p.grad.data();
        for ((w, vel), &g0) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grads) {
            let g = g0 + wd * *w;
            *vel = mu * *vel + g;
            *w -= lr * (g + mu * *vel);
        }
    }
    Ok(())
}

/// Per-channel normalization computed from a training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn fit(ds: &Dataset) -> Self {
        let s = ds.images.shape();
        let mut mean = [0.0f32; 3];
        let mut std = [1.0f32; 3];
        for c in 0..s.c.min(3) {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for n in 0..s.n {
                for &v in ds.images.plane(n, c) {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let count = (s.n * s.plane()) as f64;
            let m = sum / count;
            let var = (sq / count - m * m).max(0.0);
            mean[c] = m as f32;
            std[c] = var.sqrt().max(1e-6) as f32;
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut Tensor<f32>) {
        let s = x.shape();
        let plane = s.plane();
        for n in 0..s.n {
            let sample = x.sample_mut(n);
            for c in 0..s.c.min(3) {
                let (m, sd) = (self.mean[c], self.std[c]);
                for v in &mut sample[c * plane..(c + 1) * plane] {
                    *v = (*v - m) / sd;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    /// Top-1 error in percent.
    pub top1_error: f64,
}

/// Number of rows whose argmax (first on ties) equals the label.
pub fn count_correct<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> usize {
    let k = logits.shape().c;
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.sample(i)[..k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Eval-mode loss and top-1 error. Uses running BN statistics; no
/// augmentation; the network is not modified.
pub fn evaluate_top1(net: &Network<f32>, ds: &Dataset, norm: &Normalizer, batch_size: usize) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (mut x, labels) = ds.batch(chunk);
        norm.apply(&mut x);
        let logits = net.logits(&x)?;
        let (loss, _) = crate::tensor::ops::softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    Ok(EvalResult {
        loss: loss_sum / ds.len() as f64,
        top1_error: 100.0 * (1.0 - correct as f64 / ds.len() as f64),
    })
}

/// One row of the metrics stream. Top-1 values are error percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_top1,val_loss,val_top1,seconds";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.6},{:.4},{},{},{:.3}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_top1,
            opt(self.val_loss),
            opt(self.val_top1.map(|v| (v * 100.0).round() / 100.0)),
            self.seconds
        )
    }

    /// Equality of everything except wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.lr.to_bits() == other.lr.to_bits()
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.train_top1.to_bits() == other.train_top1.to_bits()
            && self.val_loss.map(f64::to_bits) == other.val_loss.map(f64::to_bits)
            && self.val_top1.map(f64::to_bits) == other.val_top1.map(f64::to_bits)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", EpochRecord::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(out, "{}", r.csv_line());
        }
        out
    }

    pub fn same_values(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_values(b))
    }
}

const PARAM_PREFIX: &str = "param/";
const VELOCITY_PREFIX: &str = "velocity/";
const STAT_PREFIX: &str = "stat/";

/// Copy parameters and running statistics out of a checkpoint, checking
/// every blob against the network's own shapes.
pub fn load_network_state(store: &mut ParamStore<f32>, ck: &Checkpoint) -> Result<()> {
    let values = store
        .params()
        .iter()
        .map(|p| {
            ck.blob(&format!("{PARAM_PREFIX}{}", p.name))?
                .to_tensor(p.value.shape())
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = ck.blobs.iter().find(|b| {
        b.name
            .strip_prefix(PARAM_PREFIX)
            .is_some_and(|n| !store.params().iter().any(|p| p.name == n))
    }) {
        return Err(Error::Format(format!(
            "blob '{}' has no matching network parameter",
            extra.name
        )));
    }
    for (p, v) in store.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    for (name, running) in store.stats_mut() {
        let c = running.channels();
        running.mean = ck.blob(&format!("{STAT_PREFIX}{name}/mean"))?.to_vec(c)?;
        running.var = ck.blob(&format!("{STAT_PREFIX}{name}/var"))?.to_vec(c)?;
    }
    Ok(())
}

fn network_blobs(store: &ParamStore<f32>, out: &mut Vec<Blob>) {
    for p in store.params() {
        out.push(Blob::from_tensor(format!("{PARAM_PREFIX}{}", p.name), &p.value));
    }
    for (name, running) in store.stats() {
        out.push(Blob::from_slice(format!("{STAT_PREFIX}{name}/mean"), &running.mean));
        out.push(Blob::from_slice(format!("{STAT_PREFIX}{name}/var"), &running.var));
    }
}

/// A resumable training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network<f32>,
    pub cfg: TrainConfig,
    pub normalizer: Normalizer,
    velocity: Vec<Tensor<f32>>,
    rng: ChaCha8Rng,
    epoch: usize,
    initial_loss: Option<f64>,
    bad_epochs: usize,
    metrics: Metrics,
}

impl Trainer {
    pub fn new(spec: NetworkSpec, cfg: TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        if train.classes != spec.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, network {}",
                train.classes, spec.num_classes
            )));
        }
        let net = Network::new(spec, cfg.seed)?;
        let velocity = zero_velocity(net.store());
        Ok(Self {
            net,
            normalizer: Normalizer::fit(train),
            velocity,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED)),
            cfg,
            epoch: 0,
            initial_loss: None,
            bad_epochs: 0,
            metrics: Metrics::default(),
        })
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Loss of the very first mini-batch, before any update.
    pub fn initial_loss(&self) -> Option<f64> {
        self.initial_loss
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalResult> {
        evaluate_top1(&self.net, ds, &self.normalizer, self.cfg.batch_size)
    }

    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochRecord> {
        let start = Instant::now();
        let lr = cosine_lr(self.epoch, &self.cfg)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let (mut x, labels) = train.batch(chunk);
            self.normalizer.apply(&mut x);
            if self.cfg.augment {
                augment_batch(&mut x, &mut self.rng)?;
            }
            let step = self.net.train_step(&x, &labels)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}", self.epoch)));
            }
            self.initial_loss.get_or_insert(step.loss);
            loss_sum += step.loss * chunk.len() as f64;
            correct += count_correct(&step.logits, &labels);
            sgd_nesterov_step(
                self.net.store_mut(),
                &mut self.velocity,
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
            )
            .map_err(|e| Error::NonFinite(format!("epoch {}: {e}", self.epoch)))?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let initial = self.initial_loss.unwrap_or(train_loss);
        if train_loss > self.cfg.divergence_factor * initial {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.divergence_patience {
                return Err(Error::Diverged(format!(
                    "epoch {}: loss {train_loss:.4} exceeded {}x the initial {initial:.4} for {} epochs",
                    self.epoch, self.cfg.divergence_factor, self.bad_epochs
                )));
            }
        } else {
            self.bad_epochs = 0;
        }
        let eval_now = (self.epoch + 1).is_multiple_of(self.cfg.eval_every) || self.epoch + 1 == self.cfg.epochs;
        let val_result = match val {
            Some(v) if eval_now => Some(self.evaluate(v)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss,
            train_top1: 100.0 * (1.0 - correct as f64 / train.len() as f64),
            val_loss: val_result.map(|r| r.loss),
            val_top1: val_result.map(|r| r.top1_error),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.metrics.records.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Run the remaining epochs, appending each record to `csv` (header is
    /// written when the file is new or the run starts at epoch 0).
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, csv: Option<&Path>) -> Result<&Metrics> {
        self.fit_until(self.cfg.epochs, train, val, csv)
    }

    /// Like `fit`, but stop after epoch `until - 1`.
    pub fn fit_until(
        &mut self,
        until: usize,
        train: &Dataset,
        val: Option<&Dataset>,
        csv: Option<&Path>,
    ) -> Result<&Metrics> {
        let mut file = match csv {
            Some(path) => {
                let fresh = self.epoch == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(path)?;
                if fresh {
                    writeln!(f, "{}", EpochRecord::CSV_HEADER)?;
                }
                Some(f)
            }
            None => None,
        };
        while self.epoch < until.min(self.cfg.epochs) {
            let record = self.run_epoch(train, val)?;
            if let Some(f) = file.as_mut() {
                writeln!(f, "{}", record.csv_line())?;
                f.flush()?;
            }
        }
        Ok(&self.metrics)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut blobs = Vec::new();
        network_blobs(self.net.store(), &mut blobs);
        for (p, v) in self.net.store().params().iter().zip(&self.velocity) {
            blobs.push(Blob::from_tensor(format!("{VELOCITY_PREFIX}{}", p.name), v));
        }
        blobs.push(Blob::from_slice("normalizer/mean", &self.normalizer.mean));
        blobs.push(Blob::from_slice("normalizer/std", &self.normalizer.std));
        Checkpoint {
            spec: self.net.spec().to_text(),
            epoch: self.epoch as u32,
            rng: RngState::capture(&self.rng),
            meta: vec![
                ("initial_loss".into(), self.initial_loss.unwrap_or(f64::NAN)),
                ("bad_epochs".into(), self.bad_epochs as f64),
            ],
            blobs,
        }
    }

    /// Rebuild a run from a checkpoint. The network spec comes from the
    /// checkpoint's echo; `expected`, when given, must match it.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig, expected: Option<&NetworkSpec>) -> Result<Self> {
        cfg.validate()?;
        let spec = NetworkSpec::from_text(&ck.spec)?;
        let spec = match expected {
            Some(e) => {
                let mut e = e.clone();
                e.preset = None;
                if e != spec {
                    let mut net = Network::<f32>::new(e, cfg.seed)?;
                    load_network_state(net.store_mut(), ck)?;
                    return Err(Error::Format(
                        "checkpoint spec differs from the requested network".into(),
                    ));
                }
                spec
            }
            None => spec,
        };
        let mut net = Network::<f32>::new(spec, cfg.seed)?;
        load_network_state(net.store_mut(), ck)?;
        let velocity = net
            .store()
            .params()
            .iter()
            .map(|p| {
                ck.blob(&format!("{VELOCITY_PREFIX}{}", p.name))?
                    .to_tensor(p.value.shape())
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = ck.blob("normalizer/mean")?.to_vec(3)?;
        let std = ck.blob("normalizer/std")?.to_vec(3)?;
        let initial = ck.meta("initial_loss")?;
        Ok(Self {
            net,
            cfg,
            normalizer: Normalizer {
                mean: [mean[0], mean[1], mean[2]],
                std: [std[0], std[1], std[2]],
            },
            velocity,
            rng: ck.rng.restore(),
            epoch: ck.epoch as usize,
            initial_loss: (!initial.is_nan()).then_some(initial),
            bad_epochs: ck.meta("bad_epochs")? as usize,
            metrics: Metrics::default(),
        })
    }
}

/// Build a network for evaluation from a checkpoint.
pub fn network_from_checkpoint(ck: &Checkpoint) -> Result<(Network<f32>, Normalizer)> {
    let spec = NetworkSpec::from_text(&ck.spec)?;
    let mut net = Network::<f32>::new(spec, 0)?;
    load_network_state(net.store_mut(), ck)?;
    let mean = ck.blob("normalizer/mean")?.to_vec(3)?;
    let std = ck.blob("normalizer/std")?.to_vec(3)?;
    Ok((
        net,
        Normalizer {
            mean: [mean[0], mean[1], mean[2]],
            std: [std[0], std[1], std[2]],
        },
    ))
}
