//! `train` / `evaluate`: the regimes of `run_experiment`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usleep::cohort::{AgeGroupScheme, Split};
use usleep::model::{load_checkpoint, save_checkpoint, BnVariant, CheckpointError, UNet};
use usleep::sampler::Sampler;
use usleep::store::RecordingStore;
use usleep::train::{evaluate, history_csv, train, EvalReport, Regime, TrainError};

use crate::config::{RunConfig, RunRegime};
use crate::data::{create_run_dir, load_manifests, write, Cohort};
use crate::error::{config, data, CliError, Result};

pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_TXT: &str = "eval.txt";

fn load_source(path: &Path) -> Result<UNet> {
    load_checkpoint::<f64>(path).map_err(|e| match e {
        CheckpointError::Io { .. } => CliError::Config(format!("source checkpoint: {e}")),
        _ => CliError::Data(format!("source checkpoint: {e}")),
    })
}

/// Checks the source model against the regime before any training.
fn prepare_model(cfg: &RunConfig) -> Result<Option<UNet>> {
    let Some(path) = &cfg.source else { return Ok(None) };
    let model = load_source(path)?;
    let variant = model.config().bn_variant;
    let ok = match cfg.regime {
        RunRegime::Dt => true,
        RunRegime::Finetune | RunRegime::FinetuneIndependent | RunRegime::FinetuneSabn => variant == BnVariant::Vanilla,
        RunRegime::Scratch => false,
    };
    if !ok {
        return Err(CliError::Config(format!("regime {} cannot start from a {variant} checkpoint", cfg.regime)));
    }
    if cfg.regime == RunRegime::FinetuneSabn {
        return model.convert_to_sabn(cfg.groups).map(Some).map_err(config);
    }
    Ok(Some(model))
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) => config(e),
        _ => data(e),
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    cohort: &'a Cohort,
    dir: PathBuf,
    group_names: Vec<String>,
}

impl Run<'_> {
    /// Trains on the train split (of one group when given) and saves the
    /// best model as `checkpoint<tag>`.
    fn fit(&self, model: UNet, regime: Regime, group: Option<usize>, tag: &str) -> Result<UNet> {
        let what = group.map_or(String::new(), |g| format!(" of group {}", self.group_names[g]));
        let datasets = self.cohort.sampler_datasets(Split::Train, group);
        if datasets.is_empty() {
            return Err(CliError::Data(format!("no training recordings{what}")));
        }
        let val = self.cohort.eval_set(Split::Val, group);
        if val.is_empty() {
            return Err(CliError::Data(format!("no validation recordings{what}")));
        }
        let sampler = Sampler::new(datasets, self.cfg.sampler.clone()).map_err(data)?;
        let out = train(model, &sampler, &val, &self.cfg.train, regime).map_err(train_error)?;
        write(&self.dir.join(format!("history{tag}.csv")), history_csv(&out.history))?;
        let summary = format!(
            "stop={}\niterations={}\nbest_iteration={}\nbest_val_macro_f1={:.6}\n",
            out.stop.name(),
            out.iterations(),
            out.best_iteration,
            out.best_f1
        );
        write(&self.dir.join(format!("summary{tag}.txt")), &summary)?;
        println!("trained{what}: {}", summary.trim().replace('\n', ", "));
        save_checkpoint(&out.model, &self.dir.join(format!("checkpoint{tag}")), self.cfg.dtype).map_err(data)?;
        Ok(out.model)
    }

    fn evaluate(&self, model: &UNet, group: Option<usize>) -> Result<EvalReport> {
        let recs = self.cohort.eval_set(self.cfg.eval_split, group);
        if recs.is_empty() {
            let what = group.map_or(String::new(), |g| format!(" of group {}", self.group_names[g]));
            return Err(CliError::Data(format!("no {} recordings{what} to evaluate", self.cfg.eval_split)));
        }
        evaluate(model, &recs, &self.group_names).map_err(data)
    }
}

/// Every split the regime touches must have members, per group for
/// independent fine-tuning.
fn preflight(cfg: &RunConfig, cohort: &Cohort, scheme: AgeGroupScheme) -> Result<()> {
    let groups: Vec<Option<usize>> = match cfg.regime {
        RunRegime::FinetuneIndependent => (0..scheme.groups()).map(Some).collect(),
        _ => vec![None],
    };
    let mut splits = vec![cfg.eval_split];
    if cfg.regime != RunRegime::Dt {
        splits.extend([Split::Train, Split::Val]);
    }
    for g in groups {
        for &split in &splits {
            if cohort.eval_set(split, g).is_empty() {
                let what = g.map_or(String::new(), |g| format!(" of group {}", scheme.name(g)));
                return Err(CliError::Data(format!("no {split} recordings{what}")));
            }
        }
    }
    Ok(())
}

/// Runs the configured regime; returns the run directory.
pub fn run_experiment(store: &RecordingStore, cfg: &RunConfig) -> Result<PathBuf> {
    cfg.check()?;
    let scheme: AgeGroupScheme = cfg.scheme()?;
    let model = prepare_model(cfg)?;
    let manifests = load_manifests(store, &cfg.datasets)?;
    let cohort = Cohort::load(store, &manifests, scheme)?;
    let spe = model.as_ref().map_or(cfg.arch.samples_per_epoch(), |m| m.config().samples_per_epoch());
    if let Some((id, found)) = cohort.samples_per_epoch() {
        if found != spe {
            return Err(CliError::Config(format!(
                "model expects {spe} samples per epoch but `{id}` has {found}; set rate/epoch_s to match the store"
            )));
        }
    }

    preflight(cfg, &cohort, scheme)?;

    let base = cfg.runs_dir.clone().unwrap_or_else(|| store.root().join("runs"));
    let dir = create_run_dir(&base, cfg.regime.name(), cfg.seed)?;
    let text = cfg.to_text();
    write(&dir.join(CONFIG_FILE), &text)?;
    println!("run directory {}\n# resolved config\n{text}", dir.display());

    let group_names = (0..scheme.groups()).map(|g| scheme.name(g).to_string()).collect();
    let run = Run { cfg, cohort: &cohort, dir: dir.clone(), group_names };
    let report = match cfg.regime {
        RunRegime::Dt => run.evaluate(model.as_ref().expect("checked"), None)?,
        RunRegime::Scratch => {
            let mut arch = cfg.arch.clone();
            arch.bn_variant = BnVariant::Vanilla;
            arch.groups = 1;
            let fresh = UNet::build(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(config)?;
            let m = run.fit(fresh, Regime::Scratch, None, "")?;
            run.evaluate(&m, None)?
        }
        RunRegime::Finetune => {
            let m = run.fit(model.expect("checked"), Regime::Finetune, None, "")?;
            run.evaluate(&m, None)?
        }
        RunRegime::FinetuneSabn => {
            let m = run.fit(model.expect("checked"), Regime::FinetuneSabn, None, "")?;
            run.evaluate(&m, None)?
        }
        RunRegime::FinetuneIndependent => {
            let source = model.expect("checked");
            let mut rows = EvalReport { rows: Vec::new(), skipped: Vec::new() };
            for g in 0..scheme.groups() {
                let m = run.fit(source.clone(), Regime::Finetune, Some(g), &format!("-g{g}"))?;
                let r = run.evaluate(&m, Some(g))?;
                rows.rows.extend(r.rows);
                rows.skipped.extend(r.skipped);
            }
            rows
        }
    };
    write(&dir.join(EVAL_CSV), report.to_csv())?;
    let text = report.to_text();
    write(&dir.join(EVAL_TXT), &text)?;
    println!("{text}");
    Ok(dir)
}
