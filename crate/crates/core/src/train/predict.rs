//! Whole-recording inference over every EEG x EOG pair.

use std::sync::Arc;

use super::{majority_vote, metrics, Confusion, EvalError, Metrics};
use crate::model::UNet;
use crate::preprocess::{PreprocessedRecording, SleepClass};
use crate::tensor::{Real, Tensor};

/// A recording to score together with its conditioning group.
#[derive(Clone, Debug)]
pub struct EvalRecording {
    pub recording: Arc<PreprocessedRecording>,
    pub group: usize,
}

impl EvalRecording {
    pub fn new(recording: Arc<PreprocessedRecording>, group: usize) -> Self {
        EvalRecording { recording, group }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub eeg: usize,
    pub eog: usize,
    /// `n_epochs` rows of class probabilities, flattened.
    pub probs: Vec<f64>,
}

/// One eval-mode forward pass per usable channel pair over the full
/// recording.
pub fn predict_recording<T: Real>(model: &UNet<T>, eval: &EvalRecording) -> Result<Vec<PairPrediction>, EvalError> {
    let rec = &eval.recording;
    let expected = model.config().samples_per_epoch();
    let found = rec.samples_per_epoch();
    if found != expected {
        return Err(EvalError::Rate { id: rec.id.clone(), expected, found });
    }
    let pairs = rec.channel_pairs();
    if pairs.is_empty() {
        return Err(EvalError::NoUsablePairs(rec.id.clone()));
    }
    let n = rec.n_epochs() * found;
    let mut out = Vec::with_capacity(pairs.len());
    for (eeg, eog) in pairs {
        let mut data = Vec::with_capacity(2 * n);
        data.extend(rec.channels[eeg].samples[..n].iter().map(|&v| T::of(v)));
        data.extend(rec.channels[eog].samples[..n].iter().map(|&v| T::of(v)));
        let x = Tensor::new(vec![1, 2, n], data)?;
        let p = model.forward(&x, &[eval.group])?;
        out.push(PairPrediction { eeg, eog, probs: p.data().iter().map(|v| v.as_f64()).collect() });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingScore {
    pub id: String,
    pub group: usize,
    pub streams: usize,
    pub predicted: Vec<SleepClass>,
    pub confusion: Confusion,
    /// Absent when the recording has no scored epochs.
    pub metrics: Option<Metrics>,
}

/// Majority vote over the pair streams, scored against the unmasked labels.
pub fn score_recording<T: Real>(model: &UNet<T>, eval: &EvalRecording) -> Result<RecordingScore, EvalError> {
    let preds = predict_recording(model, eval)?;
    let streams: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs).collect();
    let predicted = majority_vote(&streams)?;
    let confusion = Confusion::from_pairs(&eval.recording.epoch_labels, &predicted)?;
    let metrics = match metrics(&confusion) {
        Ok(m) => Some(m),
        Err(EvalError::EmptyConfusion) => None,
        Err(e) => return Err(e),
    };
    Ok(RecordingScore {
        id: eval.recording.id.clone(),
        group: eval.group,
        streams: streams.len(),
        predicted,
        confusion,
        metrics,
    })
}

/// Scores every recording, in parallel when the `parallel` feature is on.
pub fn score_all<T: Real>(model: &UNet<T>, recordings: &[EvalRecording]) -> Result<Vec<RecordingScore>, EvalError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        recordings.par_iter().map(|r| score_recording(model, r)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        recordings.iter().map(|r| score_recording(model, r)).collect()
    }
}
