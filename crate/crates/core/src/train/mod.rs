//! Masked cross-entropy training with Adam and early stopping, plus
//! majority-vote evaluation.

mod metrics;
mod predict;
mod report;
mod stats;

pub use metrics::{majority_vote, metrics, Confusion, Metrics};
pub use predict::{predict_recording, score_all, score_recording, EvalRecording, PairPrediction, RecordingScore};
pub use report::{compare, evaluate, Aggregate, Comparison, EvalReport, GroupComparison, RecordingResult};
pub use stats::{beta_reg, ln_gamma, paired_ttest, student_t_cdf, Sides, TTest};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{BnVariant, TensorKind, UNet};
use crate::preprocess::{EpochLabel, N_CLASSES};
use crate::sampler::{Sampler, SamplerError};
use crate::tensor::{adam_step, AdamConfig, AdamState, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: expected {expected}, found {found}")]
    Length { expected: usize, found: usize },
    #[error("confusion matrix is empty (no scored epochs)")]
    EmptyConfusion,
    #[error("majority vote needs at least one stream")]
    NoStreams,
    #[error("paired t-test needs at least 2 pairs, found {0}")]
    TooFewPairs(usize),
    #[error("recording `{0}` has no usable EEG x EOG pair")]
    NoUsablePairs(String),
    #[error("recording `{id}` is at {found} samples per epoch, the model expects {expected}")]
    Rate { id: String, expected: usize, found: usize },
    #[error("recording `{0}` is missing from the other report")]
    UnpairedRecording(String),
    #[error("reports cover different recordings: only in first [{}], only in second [{}]", only_a.join(", "), only_b.join(", "))]
    RecordingSetMismatch { only_a: Vec<String>, only_b: Vec<String> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Probabilities are clamped to this before taking the log.
pub const MIN_PROBABILITY: f64 = 1e-7;

fn check_targets<T: Real>(probs: &Tensor<T>, targets: &[EpochLabel]) -> Result<(usize, usize), TensorError> {
    let (b, l, k) = probs.dims3("masked_cross_entropy")?;
    if k != N_CLASSES || targets.len() != b * l {
        return Err(TensorError::contract(
            "masked_cross_entropy",
            format!("probabilities {:?} against {} targets", probs.shape(), targets.len()),
        ));
    }
    Ok((b, l))
}

/// Mean of `-ln p[target]` over unmasked positions; 0 when all are
/// masked. `probs` is `[B, L, K]`, `targets` has `B * L` entries.
pub fn masked_cross_entropy<T: Real>(probs: &Tensor<T>, targets: &[EpochLabel]) -> Result<f64, TensorError> {
    check_targets(probs, targets)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (row, t) in probs.data().chunks(N_CLASSES).zip(targets) {
        if let Some(c) = t {
            sum -= row[c.index()].as_f64().max(MIN_PROBABILITY).ln();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// The loss together with its gradient with respect to the pre-softmax
/// logits, laid out `[B, K, L]` as the network produces them.
pub fn masked_cross_entropy_grad<T: Real>(
    probs: &Tensor<T>,
    targets: &[EpochLabel],
) -> Result<(f64, Tensor<T>), TensorError> {
    let (b, l) = check_targets(probs, targets)?;
    let loss = masked_cross_entropy(probs, targets)?;
    let n = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = vec![T::zero(); b * N_CLASSES * l];
    if n > 0 {
        let scale = T::of(1.0 / n as f64);
        for (i, t) in targets.iter().enumerate() {
            let Some(c) = t else { continue };
            let (bi, li) = (i / l, i % l);
            let row = &probs.data()[i * N_CLASSES..(i + 1) * N_CLASSES];
            for k in 0..N_CLASSES {
                let onehot = if k == c.index() { T::one() } else { T::zero() };
                grad[(bi * N_CLASSES + k) * l + li] = (row[k] - onehot) * scale;
            }
        }
    }
    Ok((loss, Tensor::new(vec![b, N_CLASSES, l], grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Scratch,
    Finetune,
    FinetuneSabn,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Finetune => "finetune",
            Regime::FinetuneSabn => "finetune_sabn",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scratch" => Ok(Regime::Scratch),
            "finetune" => Ok(Regime::Finetune),
            "finetune_sabn" => Ok(Regime::FinetuneSabn),
            _ => Err(format!("unknown training regime {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub patience: usize,
    pub max_iterations: usize,
    pub batches_per_iteration: usize,
    /// Stop as soon as validation macro F1 reaches this.
    pub target_f1: Option<f64>,
    /// Sampler threads feeding the loop.
    pub workers: usize,
    /// Keep normalization running statistics fixed. Implied by `lr = 0`.
    pub freeze_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            patience: 100,
            max_iterations: 1000,
            batches_per_iteration: 100,
            target_f1: None,
            workers: 1,
            freeze_stats: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.patience == 0 || self.max_iterations == 0 || self.batches_per_iteration == 0 {
            return Err(TrainError::Config("patience, max_iterations and batches_per_iteration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxIterations,
    TargetReached,
    Diverged,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxIterations => "max_iterations",
            StopReason::TargetReached => "target_reached",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real = f64> {
    /// The best-validation model.
    pub model: UNet<T>,
    pub history: Vec<IterationRecord>,
    pub best_iteration: usize,
    pub best_f1: f64,
    pub stop: StopReason,
}

impl<T: Real> TrainOutcome<T> {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from("iteration,train_loss,val_macro_f1\n");
    for r in history {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.iteration, r.train_loss, r.val_macro_f1));
    }
    s
}

/// Mean per-recording macro F1 under majority voting; recordings without
/// scored epochs are skipped.
pub fn validation_f1<T: Real>(model: &UNet<T>, val: &[EvalRecording]) -> Result<f64, EvalError> {
    let scores: Vec<f64> = score_all(model, val)?.into_iter().filter_map(|s| s.metrics.map(|m| m.macro_f1)).collect();
    Ok(if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 })
}

fn buffers<T: Real>(model: &UNet<T>) -> Vec<(String, Tensor<T>)> {
    model
        .named_tensors()
        .into_iter()
        .filter(|(_, _, k)| *k == TensorKind::Buffer)
        .map(|(n, t, _)| (n, t.clone()))
        .collect()
}

fn restore_buffers<T: Real>(model: &mut UNet<T>, saved: &[(String, Tensor<T>)]) {
    let mut it = saved.iter();
    for (name, t, kind) in model.named_tensors_mut() {
        if kind == TensorKind::Buffer {
            let (n, v) = it.next().expect("same buffers");
            debug_assert_eq!(*n, name);
            *t = v.clone();
        }
    }
}

/// Trains until patience runs out, `max_iterations` is hit, the target F1
/// is reached or the loss diverges. One iteration is
/// `batches_per_iteration` Adam steps followed by a validation pass.
pub fn train<T: Real>(
    mut model: UNet<T>,
    sampler: &Sampler,
    val: &[EvalRecording],
    config: &TrainConfig,
    regime: Regime,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if val.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    let variant = model.config().bn_variant;
    match regime {
        Regime::FinetuneSabn if variant != BnVariant::Sabn => {
            return Err(TrainError::Config("finetune_sabn needs a converted (sabn) model".into()));
        }
        Regime::Finetune if variant != BnVariant::Vanilla => {
            return Err(TrainError::Config(format!("finetune expects a vanilla model, got {variant}")));
        }
        _ => {}
    }
    let (model_spe, sampler_spe) = (model.config().samples_per_epoch(), sampler.config().samples_per_epoch());
    if model_spe != sampler_spe {
        return Err(TrainError::Config(format!(
            "sampler cuts {sampler_spe} samples per epoch, the model expects {model_spe}"
        )));
    }
    let freeze = config.freeze_stats || config.lr == 0.0;
    let mut adam = AdamState::<T>::new(AdamConfig::with_lr(config.lr));
    let mut stream = sampler.stream(config.workers, 2);
    let mut best = model.clone();
    let (mut best_f1, mut best_iteration, mut since) = (f64::NEG_INFINITY, 0, 0);
    let mut history = Vec::new();

    for iteration in 1..=config.max_iterations {
        let mut loss_sum = 0.0;
        for _ in 0..config.batches_per_iteration {
            let batch = stream.next().expect("sampler stream is endless")?;
            let targets: Vec<EpochLabel> = batch.targets.concat();
            let saved = if freeze { buffers(&model) } else { Vec::new() };
            let (probs, cache) = model.forward_train(&batch.inputs.cast::<T>(), &batch.groups)?;
            let (loss, dlogits) = masked_cross_entropy_grad(&probs, &targets)?;
            if !loss.is_finite() || !probs.is_finite() {
                return Ok(TrainOutcome { model: best, history, best_iteration, best_f1, stop: StopReason::Diverged });
            }
            let grads = model.backward_logits(&cache, &dlogits)?;
            let mut params = model.parameters_mut();
            let step = adam_step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads, &mut adam);
            if let Err(TensorError::NonFinite { .. }) = step {
                return Ok(TrainOutcome { model: best, history, best_iteration, best_f1, stop: StopReason::Diverged });
            }
            step?;
            if freeze {
                restore_buffers(&mut model, &saved);
            }
            loss_sum += loss;
        }
        if !model.is_finite() {
            return Ok(TrainOutcome { model: best, history, best_iteration, best_f1, stop: StopReason::Diverged });
        }
        let f1 = validation_f1(&model, val)?;
        let improved = f1 > best_f1;
        history.push(IterationRecord {
            iteration,
            train_loss: loss_sum / config.batches_per_iteration as f64,
            val_macro_f1: f1,
            improved,
        });
        if improved {
            best = model.clone();
            best_f1 = f1;
            best_iteration = iteration;
            since = 0;
        } else {
            since += 1;
        }
        if config.target_f1.is_some_and(|t| f1 >= t) {
            return Ok(TrainOutcome { model: best, history, best_iteration, best_f1, stop: StopReason::TargetReached });
        }
        if since >= config.patience {
            return Ok(TrainOutcome { model: best, history, best_iteration, best_f1, stop: StopReason::Patience });
        }
    }
    Ok(TrainOutcome { model: best, history, best_iteration, best_f1, stop: StopReason::MaxIterations })
}
