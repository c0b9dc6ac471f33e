//! Run configuration: flat `section.key = value` files merged with flags.

use std::path::{Path, PathBuf};

use hgcnet::blocks::Variant;
use hgcnet::data::{load_cifar, synth_dataset, CifarKind, Dataset};
use hgcnet::hgc::HgcLayerSpec;
use hgcnet::net::parse_key_values;
use hgcnet::net::NetworkSpec;
use hgcnet::train::{TrainConfig, DESK_CLASSES, DESK_DIFFICULTY, DESK_SAMPLES};

use crate::error::{CliError, CliResult};

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        samples: usize,
        val_samples: usize,
        difficulty: f64,
        seed: u64,
    },
    Cifar {
        dir: Option<PathBuf>,
        kind: CifarKind,
    },
}

/// One 1x1 layer to cost on its own instead of a whole network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerConfig {
    pub in_channels: Option<usize>,
    pub out_channels: Option<usize>,
    pub groups: Option<usize>,
    pub size: usize,
}

impl LayerConfig {
    fn is_set(&self) -> bool {
        self.in_channels.is_some() || self.out_channels.is_some() || self.groups.is_some()
    }

    fn spec(&self) -> CliResult<HgcLayerSpec> {
        match (self.in_channels, self.out_channels) {
            (Some(i), Some(o)) => Ok(HgcLayerSpec::new(i, o, self.groups.unwrap_or(1))?),
            _ => Err(CliError::Config("layer.in and layer.out must both be set".into())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub net: NetworkSpec,
    pub train: TrainConfig,
    pub data: DataSource,
    pub layer: Option<(HgcLayerSpec, usize)>,
    classes_explicit: bool,
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub desk: bool,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse '{value}'")))
}

impl RunConfig {
    /// Full-size defaults, or the desk-scale profile.
    pub fn defaults(desk: bool) -> Self {
        let (net, train, samples) = if desk {
            (NetworkSpec::tiny(2, Variant::Hgc), TrainConfig::desk(), DESK_SAMPLES)
        } else {
            (
                NetworkSpec::preset("hgcnet-42", 4, Variant::Hgc).expect("built-in preset"),
                TrainConfig::default(),
                DESK_SAMPLES,
            )
        };
        Self {
            net,
            train,
            data: DataSource::Synthetic {
                samples,
                val_samples: 500,
                difficulty: DESK_DIFFICULTY,
                seed: 0,
            },
            layer: None,
            classes_explicit: false,
        }
    }

    /// Defaults, then the config file, then flags.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> CliResult<Self> {
        let mut cfg = Self::defaults(ov.desk);
        if let Some(path) = path {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text).map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        }
        if let Some(seed) = ov.seed {
            cfg.train.seed = seed;
        }
        if let Some(v) = ov.variant {
            cfg.net.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let mut layer = LayerConfig {
            in_channels: None,
            out_channels: None,
            groups: None,
            size: 32,
        };
        for kv in parse_key_values(text)? {
            let at = |e: CliError| match e {
                CliError::Core(hgcnet::Error::Config(m)) => CliError::Config(format!("line {}: {m}", kv.line)),
                CliError::Core(c) if c.is_config() => CliError::Config(format!("line {}: {c}", kv.line)),
                CliError::Config(m) => CliError::Config(format!("line {}: {m}", kv.line)),
                other => other,
            };
            let (section, key) = kv.key.split_once('.').ok_or_else(|| {
                CliError::Config(format!("line {}: key '{}' needs a section prefix", kv.line, kv.key))
            })?;
            let v = kv.value.as_str();
            let res: CliResult<()> = match section {
                "net" => {
                    if key == "classes" {
                        self.classes_explicit = true;
                    }
                    self.net.set(key, v).map_err(CliError::from)
                }
                "train" => self.train.set(key, v).map_err(CliError::from),
                "data" => self.set_data(key, v),
                "layer" => match key {
                    "in" => parse(&kv.key, v).map(|x| layer.in_channels = Some(x)),
                    "out" => parse(&kv.key, v).map(|x| layer.out_channels = Some(x)),
                    "groups" => parse(&kv.key, v).map(|x| layer.groups = Some(x)),
                    "size" => parse(&kv.key, v).map(|x| layer.size = x),
                    other => Err(CliError::Config(format!("unknown layer key '{other}'"))),
                },
                other => Err(CliError::Config(format!("unknown section '{other}'"))),
            };
            res.map_err(at)?;
        }
        if layer.is_set() {
            self.layer = Some((layer.spec()?, layer.size));
        }
        Ok(())
    }

    fn set_data(&mut self, key: &str, value: &str) -> CliResult<()> {
        if key == "kind" {
            self.data = match value.to_ascii_lowercase().as_str() {
                "synthetic" | "synth" => Self::defaults(true).data,
                other => DataSource::Cifar {
                    dir: None,
                    kind: other.parse()?,
                },
            };
            return Ok(());
        }
        match &mut self.data {
            DataSource::Synthetic {
                samples,
                val_samples,
                difficulty,
                seed,
            } => match key {
                "samples" => *samples = parse(key, value)?,
                "val_samples" => *val_samples = parse(key, value)?,
                "difficulty" => *difficulty = parse(key, value)?,
                "seed" => *seed = parse(key, value)?,
                other => return Err(CliError::Config(format!("unknown synthetic data key '{other}'"))),
            },
            DataSource::Cifar { dir, .. } => match key {
                "dir" => *dir = Some(PathBuf::from(value)),
                other => return Err(CliError::Config(format!("unknown cifar data key '{other}'"))),
            },
        }
        Ok(())
    }

    fn validate(&mut self) -> CliResult<()> {
        if !self.classes_explicit {
            self.net.num_classes = match &self.data {
                DataSource::Synthetic { .. } => DESK_CLASSES,
                DataSource::Cifar { kind, .. } => kind.classes(),
            };
        }
        self.net.validate()?;
        self.train.validate()?;
        if let DataSource::Synthetic {
            samples, val_samples, ..
        } = self.data
        {
            if samples < self.net.num_classes || val_samples < self.net.num_classes {
                return Err(CliError::Config(format!(
                    "synthetic sets need at least {} samples",
                    self.net.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Training and validation sets.
    pub fn datasets(&self) -> CliResult<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic {
                samples,
                val_samples,
                difficulty,
                seed,
            } => {
                let classes = self.net.num_classes;
                let train = synth_dataset(*seed, *samples, classes, *difficulty)?;
                let val = synth_dataset(seed.wrapping_add(1), *val_samples, classes, *difficulty)?;
                Ok((train, val))
            }
            DataSource::Cifar { dir, kind } => {
                let dir = dir
                    .as_ref()
                    .ok_or_else(|| CliError::Config("data.dir is required for CIFAR data".into()))?;
                if !dir.exists() {
                    return Err(CliError::Config(format!("data.dir {} does not exist", dir.display())));
                }
                Ok(load_cifar(dir, *kind)?)
            }
        }
    }

    /// Echo of the merged settings in config-file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for line in self.net.to_text().lines().filter(|l| !l.starts_with('#')) {
            out.push_str(&format!("net.{line}\n"));
        }
        let t = &self.train;
        out.push_str(&format!(
            "train.batch_size = {}\ntrain.epochs = {}\ntrain.lr = {}\ntrain.momentum = {}\ntrain.weight_decay = {}\ntrain.seed = {}\ntrain.eval_every = {}\ntrain.augment = {}\n",
            t.batch_size, t.epochs, t.base_lr, t.momentum, t.weight_decay, t.seed, t.eval_every, t.augment
        ));
        match &self.data {
            DataSource::Synthetic {
                samples,
                val_samples,
                difficulty,
                seed,
            } => out.push_str(&format!(
                "data.kind = synthetic\ndata.samples = {samples}\ndata.val_samples = {val_samples}\ndata.difficulty = {difficulty}\ndata.seed = {seed}\n"
            )),
            DataSource::Cifar { dir, kind } => {
                let kind = if *kind == CifarKind::C10 { "c10" } else { "c100" };
                out.push_str(&format!("data.kind = {kind}\n"));
                if let Some(d) = dir {
                    out.push_str(&format!("data.dir = {}\n", d.display()));
                }
            }
        }
        out
    }
}
