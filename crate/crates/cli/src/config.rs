//! Plain-text `key=value` run configuration with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use usleep::cohort::{AgeGroupScheme, Split};
use usleep::model::ArchitectureConfig;
use usleep::psg::DerivationMode;
use usleep::sampler::SamplerConfig;
use usleep::tensor::DType;
use usleep::train::TrainConfig;

use crate::error::{config, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunRegime {
    /// Evaluate a source checkpoint without training.
    Dt,
    Scratch,
    Finetune,
    FinetuneSabn,
    FinetuneIndependent,
}

impl RunRegime {
    pub fn name(self) -> &'static str {
        match self {
            RunRegime::Dt => "dt",
            RunRegime::Scratch => "scratch",
            RunRegime::Finetune => "finetune",
            RunRegime::FinetuneSabn => "finetune_sabn",
            RunRegime::FinetuneIndependent => "finetune_independent",
        }
    }
}

impl fmt::Display for RunRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunRegime {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            RunRegime::Dt,
            RunRegime::Scratch,
            RunRegime::Finetune,
            RunRegime::FinetuneSabn,
            RunRegime::FinetuneIndependent,
        ]
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| format!("unknown regime {s:?} (expected dt|scratch|finetune|finetune_sabn|finetune_independent)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub regime: RunRegime,
    /// Age-group count G used for conditioning and per-group reporting.
    pub groups: usize,
    pub derivation: DerivationMode,
    /// Dataset ids to use; empty means every dataset in the store.
    pub datasets: Vec<String>,
    pub eval_split: Split,
    pub source: Option<PathBuf>,
    pub runs_dir: Option<PathBuf>,
    pub dtype: DType,
    pub seed: u64,
    pub arch: ArchitectureConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            regime: RunRegime::Scratch,
            groups: 1,
            derivation: DerivationMode::Aasm,
            datasets: Vec::new(),
            eval_split: Split::Test,
            source: None,
            runs_dir: None,
            dtype: DType::F32,
            seed: 0,
            arch: ArchitectureConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const ARCH_KEYS: [&str; 5] = ["depth", "base_filters", "filter_growth", "kernel_size", "rate"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::Config(format!("bad value {value:?} for `{key}`")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "regime" => self.regime = v.parse().map_err(config)?,
            "groups" => self.groups = parse(key, v)?,
            "derivation" => self.derivation = v.parse().map_err(config)?,
            "datasets" => {
                self.datasets = v.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "all").map(String::from).collect()
            }
            "eval_split" => self.eval_split = v.parse().map_err(config)?,
            "source" => self.source = optional_path(v),
            "runs_dir" => self.runs_dir = optional_path(v),
            "dtype" => self.dtype = DType::parse(v).ok_or_else(|| CliError::Config(format!("bad value {v:?} for `dtype`")))?,
            "seed" => self.seed = parse(key, v)?,
            "alpha" => self.sampler.alpha = parse(key, v)?,
            "seq_len" => self.sampler.seq_len = parse(key, v)?,
            "batch_size" => self.sampler.batch_size = parse(key, v)?,
            "aug_segment_p" => self.sampler.aug_segment_p = parse(key, v)?,
            "aug_channel_p" => self.sampler.aug_channel_p = parse(key, v)?,
            "aug_var" => self.sampler.aug_var = parse(key, v)?,
            "frac_min" => self.sampler.frac_min = parse(key, v)?,
            "frac_max" => self.sampler.frac_max = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "max_iterations" => self.train.max_iterations = parse(key, v)?,
            "batches_per_iteration" => self.train.batches_per_iteration = parse(key, v)?,
            "target_f1" => self.train.target_f1 = if v == "none" { None } else { Some(parse(key, v)?) },
            "workers" => self.train.workers = parse(key, v)?,
            "freeze_stats" => self.train.freeze_stats = parse(key, v)?,
            k if ARCH_KEYS.contains(&k) => self.arch.set(k, v).map_err(config)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// File first, then each override in order; the last writer wins.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            c.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            c.apply_text(o, "--set")?;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        c.sampler.rate = c.arch.rate;
        c.sampler.epoch_s = c.arch.epoch_s;
        c.sampler.seed = c.seed;
        Ok(c)
    }

    pub fn scheme(&self) -> Result<AgeGroupScheme> {
        AgeGroupScheme::new(self.groups).map_err(config)
    }

    /// Cross-field consistency, checked before any data is touched.
    pub fn check(&self) -> Result<()> {
        self.scheme()?;
        let needs_source = self.regime != RunRegime::Scratch;
        match (&self.source, needs_source) {
            (None, true) => return Err(CliError::Config(format!("regime {} needs a source checkpoint (source=DIR)", self.regime))),
            (Some(_), false) => return Err(CliError::Config("regime scratch does not take a source checkpoint".into())),
            _ => {}
        }
        if matches!(self.regime, RunRegime::FinetuneSabn | RunRegime::FinetuneIndependent) && self.groups < 2 {
            return Err(CliError::Config(format!("regime {} needs groups >= 2", self.regime)));
        }
        let mut arch = self.arch.clone();
        arch.groups = 1;
        arch.validate().map_err(config)?;
        self.sampler.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let arch = self.arch.to_pairs();
        let mut v = vec![
            ("regime", self.regime.to_string()),
            ("groups", self.groups.to_string()),
            ("derivation", format!("{:?}", self.derivation).to_lowercase()),
            ("datasets", if self.datasets.is_empty() { "all".into() } else { self.datasets.join(",") }),
            ("eval_split", self.eval_split.to_string()),
            ("source", show_path(&self.source)),
            ("runs_dir", show_path(&self.runs_dir)),
            ("dtype", self.dtype.name().into()),
            ("seed", self.seed.to_string()),
        ];
        v.extend(arch.into_iter().filter(|(k, _)| ARCH_KEYS.contains(k)));
        let s = &self.sampler;
        let t = &self.train;
        v.extend([
            ("alpha", format!("{:?}", s.alpha)),
            ("seq_len", s.seq_len.to_string()),
            ("batch_size", s.batch_size.to_string()),
            ("aug_segment_p", format!("{:?}", s.aug_segment_p)),
            ("aug_channel_p", format!("{:?}", s.aug_channel_p)),
            ("aug_var", format!("{:?}", s.aug_var)),
            ("frac_min", format!("{:?}", s.frac_min)),
            ("frac_max", format!("{:?}", s.frac_max)),
            ("lr", format!("{:?}", t.lr)),
            ("patience", t.patience.to_string()),
            ("max_iterations", t.max_iterations.to_string()),
            ("batches_per_iteration", t.batches_per_iteration.to_string()),
            ("target_f1", t.target_f1.map_or("none".into(), |f| format!("{f:?}"))),
            ("workers", t.workers.to_string()),
            ("freeze_stats", t.freeze_stats.to_string()),
        ]);
        v
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
