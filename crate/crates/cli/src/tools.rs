//! `report`, `inspect-sampler` and `gradcheck`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usleep::cohort::Split;
use usleep::model::{ArchitectureConfig, BnVariant, TensorKind, UNet};
use usleep::sampler::Sampler;
use usleep::store::RecordingStore;
use usleep::tensor::{numeric_gradient, DType, Real, Tensor};
use usleep::train::{compare, EvalReport};

use crate::config::RunConfig;
use crate::data::{load_manifests, read, Cohort};
use crate::error::{data, CliError, Result};
use crate::experiment::EVAL_CSV;

fn load_report(run: &Path) -> Result<EvalReport> {
    let path = run.join(EVAL_CSV);
    EvalReport::from_csv(&read(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn run_name(run: &Path) -> String {
    run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Per-run tables, plus a paired comparison when two runs are given.
pub fn report(runs: &[std::path::PathBuf]) -> Result<String> {
    let reports: Vec<EvalReport> = runs.iter().map(|r| load_report(r)).collect::<Result<_>>()?;
    let mut s = String::new();
    for (run, r) in runs.iter().zip(&reports) {
        let _ = writeln!(s, "== {}\n{}", run_name(run), r.to_text());
    }
    if let [a, b] = reports.as_slice() {
        let c = compare(a, b).map_err(data)?;
        let _ = writeln!(s, "== macro F1 per group, mean ± sd across recordings; two-sided paired t-test");
        s.push_str(&c.to_text(&run_name(&runs[0]), &run_name(&runs[1])));
    }
    Ok(s)
}

/// Tab-separated log of `draws` sampler draws from `split`.
pub fn inspect_sampler(store: &RecordingStore, cfg: &RunConfig, split: Split, draws: usize) -> Result<String> {
    cfg.check()?;
    let manifests = load_manifests(store, &cfg.datasets)?;
    let cohort = Cohort::load(store, &manifests, cfg.scheme()?)?;
    let datasets = cohort.sampler_datasets(split, None);
    if datasets.is_empty() {
        return Err(CliError::Data(format!("no {split} recordings")));
    }
    let sampler = Sampler::new(datasets, cfg.sampler.clone()).map_err(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = String::from("dataset\tsubject\tderivation_pair\tanchor_class\toffset\n");
    for _ in 0..draws {
        let d = sampler.draw(&mut rng).map_err(data)?;
        let ds = &sampler.datasets()[d.dataset];
        let rec = &ds.recordings[d.recording].recording;
        let pair = format!("{}+{}", rec.channels[d.eeg].derivation.label(), rec.channels[d.eog].derivation.label());
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", ds.id, rec.subject.subject_id, pair, d.anchor_class.token(), d.offset);
    }
    Ok(s)
}

pub struct GradcheckArgs {
    pub depth: usize,
    pub base_filters: f64,
    pub variant: BnVariant,
    pub groups: usize,
    pub dtype: DType,
    pub seed: u64,
}

fn loss(m: &UNet, x: &Tensor, groups: &[usize], targets: &[usize]) -> f64 {
    let mut m = m.clone();
    let (p, _) = m.forward_train(x, groups).expect("forward");
    targets.iter().enumerate().map(|(i, &t)| -p.data()[i * 5 + t].ln()).sum()
}

fn analytic<T: Real>(m: &UNet, x: &Tensor, groups: &[usize], targets: &[usize]) -> Vec<(String, Vec<f64>)> {
    let mut mt = m.cast::<T>();
    let (p, cache) = mt.forward_train(&x.cast(), groups).expect("forward");
    let mut dp = Tensor::<T>::zeros(p.shape());
    for (i, &t) in targets.iter().enumerate() {
        dp.data_mut()[i * 5 + t] = -T::one() / p.data()[i * 5 + t];
    }
    let grads = mt.backward(&cache, &dp).expect("backward");
    grads.into_iter().map(|(k, g)| (k, g.data().iter().map(|v| v.as_f64()).collect())).collect()
}

/// Elementwise `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn floored_relative_error(a: &[f64], n: &[f64]) -> f64 {
    a.iter().zip(n).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6)).fold(0.0, f64::max)
}

/// `|a - n| / max(|a|, |n|)` over the whole tensor.
pub fn norm_relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Gradient tolerance per precision.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-4,
        DType::F32 => 1e-2,
    }
}

/// Relative error of every parameter gradient of a small random model
/// against central differences; returns the table and the worst error.
pub fn gradcheck(args: &GradcheckArgs) -> Result<(String, f64)> {
    let arch = ArchitectureConfig {
        depth: args.depth,
        base_filters: args.base_filters,
        rate: 4.0,
        epoch_s: 2.0,
        bn_variant: args.variant,
        groups: args.groups,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let m = UNet::<f64>::build(&arch, &mut rng).map_err(|e| CliError::Config(e.to_string()))?;
    let (b, l) = (2, 2);
    let x = Tensor::from_fn(&[b, 2, l * arch.samples_per_epoch()], |_| rng.random_range(-1.5..1.5));
    let groups: Vec<usize> = (0..b).map(|i| i % arch.norm_groups()).collect();
    let targets: Vec<usize> = (0..b * l).map(|_| rng.random_range(0..5)).collect();
    let grads = match args.dtype {
        DType::F64 => analytic::<f64>(&m, &x, &groups, &targets),
        DType::F32 => analytic::<f32>(&m, &x, &groups, &targets),
    };
    let mut s = format!("{:<32} {:>6} {:>12}\n", "tensor", "size", "rel. error");
    let mut worst = 0.0f64;
    for (name, t, kind) in m.named_tensors() {
        if kind != TensorKind::Parameter {
            continue;
        }
        let a = &grads.iter().find(|(k, _)| *k == name).expect("gradient for every parameter").1;
        let n = numeric_gradient(
            |v| {
                let mut probe = m.clone();
                for (k, t, _) in probe.named_tensors_mut() {
                    if k == name {
                        t.data_mut().copy_from_slice(v);
                    }
                }
                loss(&probe, &x, &groups, &targets)
            },
            t.data(),
            1e-5,
        );
        let e = match args.dtype {
            DType::F64 => floored_relative_error(a, &n),
            DType::F32 => norm_relative_error(a, &n),
        };
        worst = worst.max(e);
        let _ = writeln!(s, "{name:<32} {:>6} {e:>12.3e}", a.len());
    }
    Ok((s, worst))
}
