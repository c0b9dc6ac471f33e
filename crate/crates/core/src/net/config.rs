//! Flat `key = value` text used for network specs and run configs.

use super::{NetworkSpec, StageSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    /// 1-based source line.
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<KeyValue>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push(KeyValue {
            line: i + 1,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got '{value}'")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

/// `4x8,4x16,5x32` into stage specs.
pub fn parse_stages(value: &str) -> Result<Vec<StageSpec>> {
    value
        .split(',')
        .map(|part| {
            let part = part.trim();
            let (m, g) = part
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("stages: expected MODULESxGROWTH, got '{part}'")))?;
            Ok(StageSpec::new(
                parse_usize("stages", m.trim())?,
                parse_usize("stages", g.trim())?,
            ))
        })
        .collect()
}

impl NetworkSpec {
    /// Apply one `key = value` setting. A `preset` key replaces the stage
    /// layout and stem, so it should come first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                let p = NetworkSpec::preset(value, self.groups, self.variant)?;
                self.stages = p.stages;
                self.stem_channels = p.stem_channels;
                self.preset = p.preset;
            }
            "variant" => self.variant = value.parse()?,
            "groups" => self.groups = parse_usize(key, value)?,
            "stages" => {
                self.stages = parse_stages(value)?;
                self.preset = None;
            }
            "se" => self.use_se = parse_bool(key, value)?,
            "se_reduction" => self.se_reduction = parse_usize(key, value)?,
            "classes" => self.num_classes = parse_usize(key, value)?,
            "stem" => {
                self.stem_channels = parse_usize(key, value)?;
                self.preset = None;
            }
            "bottleneck" => self.bottleneck_factor = parse_usize(key, value)?,
            "image" => self.image_size = parse_usize(key, value)?,
            other => return Err(Error::Config(format!("unknown network key '{other}'"))),
        }
        Ok(())
    }

    /// Spec file text that `from_text` parses back to this spec.
    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self.stages.iter().map(|s| s.to_string()).collect();
        let mut out = String::new();
        if let Some(p) = &self.preset {
            out.push_str(&format!("# from preset {p}\n"));
        }
        out.push_str(&format!(
            "variant = {}\ngroups = {}\nstages = {}\nse = {}\nse_reduction = {}\nclasses = {}\nstem = {}\nbottleneck = {}\nimage = {}\n",
            self.variant,
            self.groups,
            stages.join(","),
            self.use_se,
            self.se_reduction,
            self.num_classes,
            self.stem_channels,
            self.bottleneck_factor,
            self.image_size
        ));
        out
    }

    /// Parse a spec file. Keys not given keep the tiny-network defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = NetworkSpec::tiny(1, crate::blocks::Variant::Hgc);
        for kv in parse_key_values(text)? {
            spec.set(&kv.key, &kv.value)
                .map_err(|e| Error::Config(format!("line {}: {e}", kv.line)))?;
        }
        spec.validate()?;
        Ok(spec)
    }
}
