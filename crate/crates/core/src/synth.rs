//! Synthetic PSG generator with stage-specific EEG/EOG spectra.
//!
//! Electrodes C3, C4, E1, E2 carry the stage signal on top of a large
//! common-mode drift shared with the mastoids M1 and M2, so only proper
//! derivations recover a clean signal.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::preprocess::{preprocess, PreprocessError, PreprocessedRecording};
use crate::psg::{
    build_derivations, Channel, DerivationConfig, DerivationError, DerivationMode, Hypnogram, Recording, Stage,
    SubjectMeta, EPOCH_SECONDS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_epochs: usize,
    pub rate: f64,
    /// EEG electrodes emitted, from `C4, C3`.
    pub n_eeg: usize,
    /// EOG electrodes emitted, from `E1, E2`.
    pub n_eog: usize,
    /// Moves every spectral peak by `shift * 10%` and every amplitude by
    /// `shift * 20%`.
    pub shift: f64,
    /// Standard deviation of the white noise added to every electrode.
    pub noise: f64,
    /// Probability of an epoch being scored MOVEMENT or UNKNOWN.
    pub artefact_p: f64,
    pub age_years: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_epochs: 60,
            rate: 128.0,
            n_eeg: 2,
            n_eog: 2,
            shift: 0.0,
            noise: 0.3,
            artefact_p: 0.02,
            age_years: None,
        }
    }
}

/// (frequency Hz, amplitude) components of one modality.
type Spectrum = &'static [(f64, f64)];

fn spectra(stage: Stage) -> (Spectrum, Spectrum) {
    match stage {
        Stage::W => (&[(10.0, 1.0), (22.0, 0.4)], &[(0.4, 1.5)]),
        Stage::N1 => (&[(6.0, 0.9), (10.0, 0.2)], &[(0.25, 0.8)]),
        Stage::N2 => (&[(13.0, 1.4), (4.0, 0.4)], &[(4.0, 0.2)]),
        Stage::N3 | Stage::N4 => (&[(1.2, 3.0), (2.0, 1.0)], &[(1.2, 1.2)]),
        Stage::Rem => (&[(5.0, 0.7), (3.0, 0.5)], &[(2.0, 2.5)]),
        Stage::Movement | Stage::Unknown => (&[(30.0, 2.0)], &[(8.0, 2.0)]),
    }
}

/// Stage runs of a cycle as (stage, min epochs, max epochs).
const CYCLE: [(Stage, usize, usize); 6] = [
    (Stage::W, 2, 5),
    (Stage::N1, 2, 4),
    (Stage::N2, 3, 7),
    (Stage::N3, 3, 6),
    (Stage::N2, 2, 4),
    (Stage::Rem, 3, 6),
];

/// Shortest length that fits one full cycle.
pub const MIN_EPOCHS: usize = 15;

/// A cyclic hypnogram; every stage is present once `n_epochs >=
/// MIN_EPOCHS` (the first cycle is shortened to fit).
pub fn synth_stages<R: Rng + ?Sized>(n_epochs: usize, artefact_p: f64, rng: &mut R) -> Vec<Stage> {
    let mut runs: Vec<(Stage, usize)> = Vec::new();
    let mut first: Vec<usize> = CYCLE.iter().map(|&(_, lo, hi)| rng.random_range(lo..=hi)).collect();
    while first.iter().sum::<usize>() > n_epochs {
        let long: Vec<usize> = (0..CYCLE.len()).filter(|&k| first[k] > CYCLE[k].1).collect();
        if long.is_empty() {
            break;
        }
        first[long[rng.random_range(0..long.len())]] -= 1;
    }
    runs.extend(CYCLE.iter().zip(&first).map(|(c, &n)| (c.0, n)));
    let mut total: usize = first.iter().sum();
    while total < n_epochs {
        for &(stage, lo, hi) in &CYCLE {
            let n = rng.random_range(lo..=hi);
            runs.push((stage, n));
            total += n;
        }
    }
    let mut out = Vec::with_capacity(n_epochs);
    for (stage, n) in runs {
        for _ in 0..n {
            if out.len() == n_epochs {
                return out;
            }
            let s = if rng.random::<f64>() < artefact_p {
                if rng.random::<bool>() { Stage::Movement } else { Stage::Unknown }
            } else if stage == Stage::N3 && rng.random::<f64>() < 0.2 {
                Stage::N4
            } else {
                stage
            };
            out.push(s);
        }
    }
    out
}

fn render(stages: &[Stage], spe: usize, rate: f64, eog: bool, shift: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (fscale, ascale) = (1.0 + 0.1 * shift, 1.0 + 0.2 * shift);
    let mut out = Vec::with_capacity(stages.len() * spe);
    for &stage in stages {
        let (eeg_spec, eog_spec) = spectra(stage);
        let spec = if eog { eog_spec } else { eeg_spec };
        let jitter = rng.random_range(0.8..1.2);
        let parts: Vec<(f64, f64, f64)> = spec
            .iter()
            .map(|&(f, a)| (f * fscale * rng.random_range(0.95..1.05), a * ascale * jitter, rng.random_range(0.0..2.0 * PI)))
            .collect();
        let spindle = stage == Stage::N2 && !eog;
        for i in 0..spe {
            let t = i as f64 / rate;
            let mut v = 0.0;
            for (k, &(f, a, phase)) in parts.iter().enumerate() {
                let envelope = if spindle && k == 0 { (PI * 0.5 * t).sin().powi(2) } else { 1.0 };
                v += a * envelope * (2.0 * PI * f * t + phase).sin();
            }
            out.push(v);
        }
    }
    out
}

/// A raw recording: electrodes against a common reference plus a
/// hypnogram, deterministic in `seed`.
pub fn synth_recording(id: &str, dataset_id: &str, config: &SynthConfig, seed: u64) -> Recording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = synth_stages(config.n_epochs, config.artefact_p, &mut rng);
    let spe = (EPOCH_SECONDS * config.rate).round() as usize;
    let n = stages.len() * spe;
    let noise = Normal::new(0.0, config.noise.max(0.0)).expect("finite noise");
    let drift_f = rng.random_range(0.05..0.15);
    let drift: Vec<f64> = (0..n).map(|i| 20.0 * (2.0 * PI * drift_f * i as f64 / config.rate).sin()).collect();

    let eeg = render(&stages, spe, config.rate, false, config.shift, &mut rng);
    let eog = render(&stages, spe, config.rate, true, config.shift, &mut rng);
    let mut electrode = |label: &str, signal: Option<(&[f64], f64)>| {
        let samples = (0..n)
            .map(|i| drift[i] + signal.map_or(0.0, |(s, g)| g * s[i]) + noise.sample(&mut rng))
            .collect();
        Channel { label: label.into(), sample_rate: config.rate, samples }
    };
    let mut channels = Vec::new();
    for (label, gain) in [("C4", 1.0), ("C3", 0.9)].into_iter().take(config.n_eeg) {
        channels.push(electrode(label, Some((&eeg, gain))));
    }
    // the two EOG electrodes see eye movements with opposite polarity
    for (label, gain) in [("E1", 1.0), ("E2", -1.0)].into_iter().take(config.n_eog) {
        channels.push(electrode(label, Some((&eog, gain))));
    }
    channels.push(electrode("M1", None));
    channels.push(electrode("M2", None));

    let mut subject = SubjectMeta::new(id);
    subject.age_years = config.age_years;
    Recording {
        id: id.into(),
        dataset_id: dataset_id.into(),
        channels,
        hypnogram: Hypnogram::from_epochs(0.0, &stages),
        subject,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Derivation(#[from] DerivationError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Recommended derivations followed by the standard preprocessing.
pub fn prepare(recording: &Recording) -> Result<PreprocessedRecording, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let derived = build_derivations(recording, DerivationMode::Aasm, &DerivationConfig::default(), &mut rng)?;
    Ok(preprocess(recording, &derived)?)
}
