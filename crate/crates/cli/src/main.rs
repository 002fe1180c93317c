//! `usleep`: ingest PSG recordings, split cohorts, train, evaluate and
//! compare runs.

mod config;
mod data;
mod error;
mod experiment;
mod ingest;
mod tools;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use usleep::cohort::Split;
use usleep::model::BnVariant;
use usleep::psg::DerivationMode;
use usleep::store::STORE_ENV;
use usleep::tensor::DType;

use config::RunConfig;
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "usleep", version, about = "Sleep-stage segmentation experiments")]
struct Cli {
    /// Store root holding recordings, manifests and runs.
    #[arg(long, global = true, env = STORE_ENV)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable); applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        overrides.extend_from_slice(extra);
        RunConfig::resolve(self.config.as_deref(), &overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic EDF recordings, hypnograms and subjects.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synth")]
        dataset: String,
        #[arg(long, default_value_t = 20)]
        recordings: usize,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        /// Spectral domain shift (0 = reference domain).
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        #[arg(long, default_value_t = 0.0)]
        age_min: f64,
        #[arg(long, default_value_t = 90.0)]
        age_max: f64,
        /// Number of recordings whose C3-M2 derivation is flat.
        #[arg(long, default_value_t = 0)]
        flat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse EDF + hypnogram pairs, derive, preprocess and store them.
    Ingest {
        #[arg(long)]
        edf_dir: PathBuf,
        /// Defaults to the EDF directory.
        #[arg(long)]
        hyp_dir: Option<PathBuf>,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "aasm")]
        mode: DerivationMode,
        /// CSV `file,subject_id,family_id,age_years,sex`; defaults to
        /// `subjects.csv` in the EDF directory when present.
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Assign train/val/test splits by subject or family.
    Split {
        /// Datasets to split; all when omitted.
        #[arg(long = "dataset")]
        datasets: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment regime (see `regime` in the config).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint without training.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-group tables of one run, or a paired comparison of two.
    Report {
        #[arg(required = true, num_args = 1..=2)]
        runs: Vec<PathBuf>,
        /// Accepted for uniformity; reports are deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a tab-separated log of sampler draws.
    InspectSampler {
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value = "train")]
        split: Split,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare analytic and numeric gradients of a small random model.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 2.0)]
        base_filters: f64,
        #[arg(long, default_value = "vanilla")]
        variant: BnVariant,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value = "f64", value_parser = parse_dtype)]
        dtype: DType,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    DType::parse(s).ok_or_else(|| format!("unknown dtype {s:?} (expected f32|f64)"))
}

fn run(cli: Cli) -> Result<()> {
    let store = || data::open_store(cli.store.clone());
    match cli.command {
        Command::Synth { out, dataset, recordings, epochs, shift, age_min, age_max, flat, seed } => {
            if !(age_min >= 0.0 && age_min <= age_max) {
                return Err(CliError::Config(format!("bad age range {age_min}..{age_max}")));
            }
            if epochs < usleep::synth::MIN_EPOCHS {
                return Err(CliError::Config(format!("epochs must be at least {}", usleep::synth::MIN_EPOCHS)));
            }
            ingest::synth(&ingest::SynthArgs {
                out,
                dataset,
                recordings,
                epochs,
                shift,
                age_range: (age_min, age_max),
                flat,
                seed,
            })
        }
        Command::Ingest { edf_dir, hyp_dir, dataset, mode, subjects, seed } => {
            ingest::ingest(&store()?, &ingest::IngestArgs { edf_dir, hyp_dir, dataset, mode, subjects, seed })
        }
        Command::Split { datasets, seed } => ingest::split_datasets(&store()?, &datasets, seed),
        Command::Train { config } => {
            let cfg = config.resolve(&[])?;
            experiment::run_experiment(&store()?, &cfg).map(|_| ())
        }
        Command::Evaluate { checkpoint, config } => {
            let extra = ["regime=dt".to_string(), format!("source={}", checkpoint.display())];
            let cfg = config.resolve(&extra)?;
            experiment::run_experiment(&store()?, &cfg).map(|_| ())
        }
        Command::Report { runs, seed: _ } => {
            print!("{}", tools::report(&runs)?);
            Ok(())
        }
        Command::InspectSampler { draws, split, config } => {
            let cfg = config.resolve(&[])?;
            eprint!("# resolved config\n{}", cfg.to_text());
            print!("{}", tools::inspect_sampler(&store()?, &cfg, split, draws)?);
            Ok(())
        }
        Command::Gradcheck { depth, base_filters, variant, groups, dtype, seed } => {
            let args = tools::GradcheckArgs { depth, base_filters, variant, groups, dtype, seed };
            let (table, worst) = tools::gradcheck(&args)?;
            print!("{table}");
            let tol = tools::tolerance(dtype);
            println!("worst relative error {worst:.3e} (tolerance {tol:.0e})");
            if worst >= tol {
                return Err(CliError::Data(format!("gradient check failed: {worst:.3e} >= {tol:.0e}")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("usleep: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
