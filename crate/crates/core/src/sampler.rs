//! Hierarchical class-balanced sampling of training sequences.
//!
//! Each batch element is drawn in four steps: a dataset by
//! [`dataset_probability`], a recording uniformly within it, one usable EEG
//! and one usable EOG derivation uniformly, and finally a window of `L`
//! epochs anchored on an epoch of a uniformly drawn class present in the
//! recording.

use std::collections::BTreeMap;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use thiserror::Error;

use crate::preprocess::{EpochLabel, PreprocessedRecording, SleepClass};
use crate::psg::Modality;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("no datasets to sample from")]
    NoDatasets,
    #[error("dataset `{0}` has no recordings")]
    EmptyDataset(String),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("no eligible recording found after {0} draws")]
    RetriesExhausted(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub alpha: f64,
    /// Sequence length `L` in epochs.
    pub seq_len: usize,
    pub epoch_s: f64,
    pub rate: f64,
    pub aug_segment_p: f64,
    pub aug_channel_p: f64,
    pub aug_var: f64,
    pub frac_min: f64,
    pub frac_max: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 0.5,
            seq_len: 35,
            epoch_s: 30.0,
            rate: 128.0,
            aug_segment_p: 0.1,
            aug_channel_p: 0.1,
            aug_var: 0.01,
            frac_min: 0.001,
            frac_max: 0.33,
            batch_size: 12,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn samples_per_epoch(&self) -> usize {
        (self.epoch_s * self.rate).round() as usize
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.aug_segment_p) || !(0.0..=1.0).contains(&self.aug_channel_p) {
            return bad("augmentation probabilities must lie in [0, 1]");
        }
        if !(self.frac_min > 0.0 && self.frac_min < self.frac_max && self.frac_max <= 1.0) {
            return bad("need 0 < frac_min < frac_max <= 1");
        }
        if self.seq_len == 0 || self.batch_size == 0 || self.samples_per_epoch() == 0 {
            return bad("seq_len, batch_size and samples per epoch must be positive");
        }
        if !(self.aug_var >= 0.0) {
            return bad("aug_var must be non-negative");
        }
        Ok(())
    }
}

/// `P(D) = alpha / N + (1 - alpha) * size_D / sum(size)`.
pub fn dataset_probability(sizes: &[usize], alpha: f64) -> Result<Vec<f64>, SamplerError> {
    if sizes.is_empty() {
        return Err(SamplerError::NoDatasets);
    }
    let total: usize = sizes.iter().sum();
    if sizes.contains(&0) {
        return Err(SamplerError::Config("dataset sizes must be positive".into()));
    }
    let n = sizes.len() as f64;
    Ok(sizes
        .iter()
        .map(|&s| alpha / n + (1.0 - alpha) * s as f64 / total as f64)
        .collect())
}

/// A recording prepared for sampling, with its conditioning group.
#[derive(Clone, Debug)]
pub struct SamplerRecording {
    pub recording: Arc<PreprocessedRecording>,
    pub group: usize,
    by_class: BTreeMap<SleepClass, Vec<usize>>,
    eeg: Vec<usize>,
    eog: Vec<usize>,
}

impl SamplerRecording {
    pub fn new(recording: Arc<PreprocessedRecording>, group: usize) -> Self {
        let mut by_class: BTreeMap<SleepClass, Vec<usize>> = BTreeMap::new();
        for (i, l) in recording.epoch_labels.iter().enumerate() {
            if let Some(c) = l {
                by_class.entry(*c).or_default().push(i);
            }
        }
        let eeg = recording.usable(Modality::Eeg);
        let eog = recording.usable(Modality::Eog);
        SamplerRecording { recording, group, by_class, eeg, eog }
    }

    pub fn classes_present(&self) -> Vec<SleepClass> {
        self.by_class.keys().copied().collect()
    }

    fn eligible(&self, seq_len: usize) -> bool {
        !self.eeg.is_empty() && !self.eog.is_empty() && !self.by_class.is_empty() && self.recording.n_epochs() >= seq_len
    }
}

#[derive(Clone, Debug)]
pub struct SamplerDataset {
    pub id: String,
    pub recordings: Vec<SamplerRecording>,
}

/// Where one batch element came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub dataset: usize,
    pub recording: usize,
    pub eeg: usize,
    pub eog: usize,
    pub anchor_class: SleepClass,
    pub anchor_epoch: usize,
    /// Position of the anchor inside the window before clamping.
    pub offset: usize,
    /// First epoch of the (clamped) window.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleElement {
    /// `[2, L * samples_per_epoch]`, EEG first.
    pub input: Vec<f64>,
    pub targets: Vec<EpochLabel>,
    pub group: usize,
    pub draw: Draw,
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub inputs: Tensor<f64>,
    pub targets: Vec<Vec<EpochLabel>>,
    pub groups: Vec<usize>,
    pub draws: Vec<Draw>,
}

/// Draws of an ineligible recording before giving up.
pub const MAX_RETRIES: usize = 1000;

#[derive(Clone, Debug)]
pub struct Sampler {
    config: SamplerConfig,
    datasets: Arc<Vec<SamplerDataset>>,
    dataset_dist: WeightedIndex<f64>,
    probabilities: Vec<f64>,
}

impl Sampler {
    pub fn new(datasets: Vec<SamplerDataset>, config: SamplerConfig) -> Result<Self, SamplerError> {
        config.validate()?;
        if let Some(d) = datasets.iter().find(|d| d.recordings.is_empty()) {
            return Err(SamplerError::EmptyDataset(d.id.clone()));
        }
        let sizes: Vec<usize> = datasets.iter().map(|d| d.recordings.len()).collect();
        let probabilities = dataset_probability(&sizes, config.alpha)?;
        for d in &datasets {
            for r in &d.recordings {
                if (r.recording.rate - config.rate).abs() > 1e-9 {
                    return Err(SamplerError::Config(format!(
                        "recording `{}` is at {} Hz, sampler expects {} Hz",
                        r.recording.id, r.recording.rate, config.rate
                    )));
                }
            }
        }
        if !datasets.iter().flat_map(|d| &d.recordings).any(|r| r.eligible(config.seq_len)) {
            return Err(SamplerError::RetriesExhausted(0));
        }
        let dataset_dist = WeightedIndex::new(&probabilities).expect("positive probabilities");
        Ok(Sampler { config, datasets: Arc::new(datasets), dataset_dist, probabilities })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn datasets(&self) -> &[SamplerDataset] {
        &self.datasets
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Steps 1 to 4 without cutting the signal.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Draw, SamplerError> {
        let l = self.config.seq_len;
        for _ in 0..MAX_RETRIES {
            let dataset = self.dataset_dist.sample(rng);
            let recs = &self.datasets[dataset].recordings;
            let recording = rng.random_range(0..recs.len());
            let rec = &recs[recording];
            if !rec.eligible(l) {
                continue;
            }
            let eeg = rec.eeg[rng.random_range(0..rec.eeg.len())];
            let eog = rec.eog[rng.random_range(0..rec.eog.len())];
            let classes: Vec<(&SleepClass, &Vec<usize>)> = rec.by_class.iter().collect();
            let (&anchor_class, epochs) = classes[rng.random_range(0..classes.len())];
            let anchor_epoch = epochs[rng.random_range(0..epochs.len())];
            let offset = rng.random_range(0..l);
            let n = rec.recording.n_epochs();
            let start = anchor_epoch.saturating_sub(offset).min(n - l);
            return Ok(Draw { dataset, recording, eeg, eog, anchor_class, anchor_epoch, offset, start });
        }
        Err(SamplerError::RetriesExhausted(MAX_RETRIES))
    }

    pub fn recording(&self, draw: &Draw) -> &SamplerRecording {
        &self.datasets[draw.dataset].recordings[draw.recording]
    }

    pub fn cut(&self, draw: Draw) -> SampleElement {
        let rec = self.recording(&draw);
        let spe = self.config.samples_per_epoch();
        let l = self.config.seq_len;
        let (a, b) = (draw.start * spe, (draw.start + l) * spe);
        let r = &rec.recording;
        let mut input = Vec::with_capacity(2 * l * spe);
        input.extend_from_slice(&r.channels[draw.eeg].samples[a..b]);
        input.extend_from_slice(&r.channels[draw.eog].samples[a..b]);
        SampleElement {
            input,
            targets: r.epoch_labels[draw.start..draw.start + l].to_vec(),
            group: rec.group,
            draw,
        }
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampleElement, SamplerError> {
        Ok(self.cut(self.draw(rng)?))
    }

    /// Generator for batch `index`; independent of how batches are
    /// distributed over workers.
    pub fn batch_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index);
        rng
    }

    pub fn batch(&self, index: u64) -> Result<SampleBatch, SamplerError> {
        let mut rng = self.batch_rng(index);
        let b = self.config.batch_size;
        let width = 2 * self.config.seq_len * self.config.samples_per_epoch();
        let mut data = Vec::with_capacity(b * width);
        let (mut targets, mut groups, mut draws) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..b {
            let mut el = self.sample_sequence(&mut rng)?;
            let plan = AugmentPlan::draw(&self.config, &mut rng);
            plan.apply(&mut el.input, 2, self.config.aug_var, &mut rng);
            data.extend_from_slice(&el.input);
            targets.push(el.targets);
            groups.push(el.group);
            draws.push(el.draw);
        }
        let inputs = Tensor::new(vec![b, 2, width / 2], data).expect("batch shape");
        Ok(SampleBatch { inputs, targets, groups, draws })
    }

    /// Ordered stream of batches `0, 1, 2, ...` produced by `workers`
    /// threads; identical to calling [`Sampler::batch`] sequentially.
    pub fn stream(&self, workers: usize, capacity: usize) -> BatchStream {
        let workers = workers.max(1);
        let mut receivers = Vec::with_capacity(workers);
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = sync_channel(capacity.max(1));
            let sampler = self.clone();
            handles.push(std::thread::spawn(move || {
                let mut index = w as u64;
                loop {
                    if tx.send(sampler.batch(index)).is_err() {
                        return;
                    }
                    index += workers as u64;
                }
            }));
            receivers.push(rx);
        }
        BatchStream { receivers, handles, next: 0 }
    }
}

pub struct BatchStream {
    receivers: Vec<Receiver<Result<SampleBatch, SamplerError>>>,
    handles: Vec<JoinHandle<()>>,
    next: usize,
}

impl Iterator for BatchStream {
    type Item = Result<SampleBatch, SamplerError>;

    fn next(&mut self) -> Option<Self::Item> {
        let w = self.next % self.receivers.len();
        self.next += 1;
        self.receivers[w].recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// The random choices of one augmentation, drawn before any noise.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Fraction of the sequence replaced, if the segment corruption fires.
    pub segment_fraction: Option<f64>,
    /// Position of the span start as a fraction of the free room.
    pub segment_position: f64,
    /// Channel fully replaced, if the channel corruption fires.
    pub channel: Option<usize>,
}

impl AugmentPlan {
    pub fn draw<R: Rng + ?Sized>(config: &SamplerConfig, rng: &mut R) -> Self {
        let segment_fraction = (rng.random::<f64>() < config.aug_segment_p).then(|| {
            let (lo, hi) = (config.frac_min.ln(), config.frac_max.ln());
            rng.random_range(lo..hi).exp()
        });
        let segment_position = rng.random::<f64>();
        let channel = (rng.random::<f64>() < config.aug_channel_p).then(|| rng.random_range(0..2));
        AugmentPlan { segment_fraction, segment_position, channel }
    }

    pub fn identity() -> Self {
        AugmentPlan { segment_fraction: None, segment_position: 0.0, channel: None }
    }

    pub fn is_identity(&self) -> bool {
        self.segment_fraction.is_none() && self.channel.is_none()
    }

    /// Replaces the planned span (shared by all channels) and channel of a
    /// channel-major signal with `N(mean(signal), var)` noise.
    pub fn apply<R: Rng + ?Sized>(&self, signal: &mut [f64], channels: usize, var: f64, rng: &mut R) {
        if self.is_identity() || signal.is_empty() {
            return;
        }
        let mean = signal.iter().sum::<f64>() / signal.len() as f64;
        let noise = Normal::new(mean, var.sqrt()).expect("finite noise parameters");
        let width = signal.len() / channels;
        if let Some(frac) = self.segment_fraction {
            let span = ((frac * width as f64).round() as usize).clamp(1, width);
            let start = ((width - span) as f64 * self.segment_position).floor() as usize;
            for c in 0..channels {
                for v in &mut signal[c * width + start..c * width + start + span] {
                    *v = noise.sample(rng);
                }
            }
        }
        if let Some(c) = self.channel {
            for v in &mut signal[c * width..(c + 1) * width] {
                *v = noise.sample(rng);
            }
        }
    }
}
