use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnVariant {
    Vanilla,
    Ccbn,
    Sabn,
}

impl BnVariant {
    pub fn name(self) -> &'static str {
        match self {
            BnVariant::Vanilla => "vanilla",
            BnVariant::Ccbn => "ccbn",
            BnVariant::Sabn => "sabn",
        }
    }
}

impl fmt::Display for BnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BnVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "vanilla" => Ok(BnVariant::Vanilla),
            "ccbn" => Ok(BnVariant::Ccbn),
            "sabn" => Ok(BnVariant::Sabn),
            _ => Err(ConfigError::Value { key: "bn_variant".into(), value: s.into() }),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("bad value {value:?} for `{key}`")]
    Value { key: String, value: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("invalid architecture: {0}")]
    Invalid(String),
}

pub const N_CLASSES: usize = crate::preprocess::N_CLASSES;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureConfig {
    pub depth: usize,
    pub base_filters: f64,
    pub filter_growth: f64,
    pub kernel_size: usize,
    pub rate: f64,
    pub epoch_s: f64,
    pub n_classes: usize,
    pub in_channels: usize,
    pub bn_variant: BnVariant,
    /// Number of conditioning groups; ignored by the vanilla variant.
    pub groups: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            depth: 12,
            base_filters: 5.0,
            filter_growth: std::f64::consts::SQRT_2,
            kernel_size: 9,
            rate: 128.0,
            epoch_s: 30.0,
            n_classes: N_CLASSES,
            in_channels: 2,
            bn_variant: BnVariant::Vanilla,
            groups: 1,
        }
    }
}

const KEYS: [&str; 10] = [
    "depth",
    "base_filters",
    "filter_growth",
    "kernel_size",
    "rate",
    "epoch_s",
    "n_classes",
    "in_channels",
    "bn_variant",
    "groups",
];

impl ArchitectureConfig {
    /// Filter count of encoder/decoder level `n` (0-based):
    /// `floor(base * growth^(n + 1))`.
    pub fn filters(&self, n: usize) -> usize {
        (self.base_filters * self.filter_growth.powi(n as i32 + 1) + 1e-9).floor() as usize
    }

    pub fn filter_schedule(&self) -> Vec<usize> {
        (0..self.depth).map(|n| self.filters(n)).collect()
    }

    pub fn samples_per_epoch(&self) -> usize {
        (self.epoch_s * self.rate).round() as usize
    }

    /// Time extents are padded to a multiple of this.
    pub fn alignment(&self) -> usize {
        1 << self.depth
    }

    /// Groups the normalization layers carry.
    pub fn norm_groups(&self) -> usize {
        match self.bn_variant {
            BnVariant::Vanilla => 1,
            _ => self.groups,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.depth == 0 || self.depth > 16 {
            return bad(format!("depth {} outside 1..=16", self.depth));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        let spe = self.epoch_s * self.rate;
        if !(spe >= 1.0) || (spe - spe.round()).abs() > 1e-9 {
            return bad(format!("epoch_s * rate = {spe} must be a positive integer"));
        }
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}"));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if (0..self.depth).any(|n| self.filters(n) == 0) {
            return bad("filter schedule contains a zero".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("depth", self.depth.to_string()),
            ("base_filters", format!("{:?}", self.base_filters)),
            ("filter_growth", format!("{:?}", self.filter_growth)),
            ("kernel_size", self.kernel_size.to_string()),
            ("rate", format!("{:?}", self.rate)),
            ("epoch_s", format!("{:?}", self.epoch_s)),
            ("n_classes", self.n_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("bn_variant", self.bn_variant.to_string()),
            ("groups", self.groups.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let err = || ConfigError::Value { key: key.into(), value: value.into() };
        let v = value.trim();
        match key {
            "depth" => self.depth = v.parse().map_err(|_| err())?,
            "base_filters" => self.base_filters = v.parse().map_err(|_| err())?,
            "filter_growth" => {
                self.filter_growth = match v {
                    "sqrt2" => std::f64::consts::SQRT_2,
                    _ => v.parse().map_err(|_| err())?,
                }
            }
            "kernel_size" => self.kernel_size = v.parse().map_err(|_| err())?,
            "rate" => self.rate = v.parse().map_err(|_| err())?,
            "epoch_s" => self.epoch_s = v.parse().map_err(|_| err())?,
            "n_classes" => self.n_classes = v.parse().map_err(|_| err())?,
            "in_channels" => self.in_channels = v.parse().map_err(|_| err())?,
            "bn_variant" => self.bn_variant = v.parse()?,
            "groups" => self.groups = v.parse().map_err(|_| err())?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let mut c = ArchitectureConfig::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(&map)
    }
}
