//! Signal preprocessing: trim to the scored span, resample to 128 Hz,
//! robust-scale and clip each channel, and map hypnogram stages onto the
//! five training classes.
//!
//! No filtering is applied at any step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::psg::{DerivedChannel, Derivation, Hypnogram, Recording, Stage, SubjectMeta, EPOCH_SECONDS};

pub const TARGET_RATE: f64 = 128.0;
/// Scaled values are clipped to `[-CLIP, CLIP]` (20 IQRs from the median).
pub const CLIP: f64 = 20.0;

/// The five scoring classes the network predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepClass {
    W,
    N1,
    N2,
    N3,
    Rem,
}

pub const N_CLASSES: usize = 5;

impl SleepClass {
    pub const ALL: [SleepClass; N_CLASSES] =
        [SleepClass::W, SleepClass::N1, SleepClass::N2, SleepClass::N3, SleepClass::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            SleepClass::W => "W",
            SleepClass::N1 => "N1",
            SleepClass::N2 => "N2",
            SleepClass::N3 => "N3",
            SleepClass::Rem => "REM",
        }
    }
}

impl fmt::Display for SleepClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Per-epoch training target; `None` is masked (no loss, not scored).
pub type EpochLabel = Option<SleepClass>;

pub const MASK_TOKEN: &str = "MASK";

pub fn label_token(label: EpochLabel) -> &'static str {
    label.map_or(MASK_TOKEN, SleepClass::token)
}

pub fn parse_label_token(s: &str) -> Option<EpochLabel> {
    match s {
        MASK_TOKEN => Some(None),
        _ => match s.parse::<Stage>().ok()? {
            Stage::Movement | Stage::Unknown => Some(None),
            st => Some(harmonize_stage(st)),
        },
    }
}

impl FromStr for SleepClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match parse_label_token(s) {
            Some(Some(c)) => Ok(c),
            _ => Err(format!("not a sleep class: {s:?}")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("recording `{0}` is ineligible: hypnogram is empty")]
    EmptyHypnogram(String),
    #[error("recording `{recording}` is ineligible: {reason}")]
    Ineligible { recording: String, reason: String },
}

/// N4 merges into N3; movement and unknown epochs are masked.
pub fn harmonize_stage(stage: Stage) -> EpochLabel {
    match stage {
        Stage::W => Some(SleepClass::W),
        Stage::N1 => Some(SleepClass::N1),
        Stage::N2 => Some(SleepClass::N2),
        Stage::N3 | Stage::N4 => Some(SleepClass::N3),
        Stage::Rem => Some(SleepClass::Rem),
        Stage::Movement | Stage::Unknown => None,
    }
}

/// Per-epoch labels on the 30 s grid of the hypnogram.
pub fn harmonize_labels(hypnogram: &Hypnogram) -> Vec<EpochLabel> {
    hypnogram.epochs().into_iter().map(harmonize_stage).collect()
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zero crossings of the sinc kept on each side of the kernel centre.
const SINC_ZEROS: f64 = 16.0;
const KAISER_BETA: f64 = 8.6;
/// Cutoff as a fraction of the lower Nyquist frequency.
const CUTOFF: f64 = 0.95;

struct SincKernel {
    fc: f64,
    half_width: f64,
    norm: f64,
}

impl SincKernel {
    fn new(from_hz: f64, to_hz: f64) -> Self {
        // cycles per input sample
        let fc = CUTOFF * 0.5 * from_hz.min(to_hz) / from_hz;
        SincKernel {
            fc,
            half_width: SINC_ZEROS / (2.0 * fc),
            norm: bessel_i0(KAISER_BETA),
        }
    }

    fn weight(&self, x: f64) -> f64 {
        let r = x / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let arg = 2.0 * self.fc * x;
        let sinc = if arg == 0.0 {
            1.0
        } else {
            (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
        };
        sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.norm
    }

    /// Weights for input samples `lo..=hi` around position `t`.
    fn taps(&self, t: f64, n: usize) -> (usize, Vec<f64>) {
        let lo = (t - self.half_width).ceil().max(0.0) as usize;
        let hi = ((t + self.half_width).floor() as isize).min(n as isize - 1);
        if hi < lo as isize {
            return (lo, Vec::new());
        }
        (lo, (lo..=hi as usize).map(|i| self.weight(t - i as f64)).collect())
    }
}

/// Kaiser-windowed sinc resampling. Output length is
/// `round(len * to / from)`; each output is normalized by its kernel sum,
/// which keeps constants exact up to the edges.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Vec<f64> {
    assert!(from_hz > 0.0 && to_hz > 0.0, "sample rates must be positive");
    if from_hz == to_hz || signal.is_empty() {
        return signal.to_vec();
    }
    let n = signal.len();
    let n_out = (n as f64 * to_hz / from_hz).round() as usize;
    let kernel = SincKernel::new(from_hz, to_hz);
    let step = from_hz / to_hz;
    let apply = |lo: usize, w: &[f64]| -> f64 {
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (k, &wk) in w.iter().enumerate() {
            acc += wk * signal[lo + k];
            wsum += wk;
        }
        if wsum.abs() > 1e-12 {
            acc / wsum
        } else {
            signal[lo.min(n - 1)]
        }
    };

    // Integral rates repeat with period `to / gcd`: reuse those kernels.
    let integral = from_hz.fract() == 0.0 && to_hz.fract() == 0.0;
    let period = if integral {
        let g = gcd(from_hz as u64, to_hz as u64);
        Some(((to_hz as u64 / g) as usize, (from_hz as u64 / g) as usize))
    } else {
        None
    };
    match period {
        Some((phases, advance)) if phases <= 4096 => {
            // output j = q*phases + r sits at input position q*advance + r*step
            let table: Vec<(isize, Vec<f64>)> = (0..phases)
                .map(|r| {
                    let frac = r as f64 * step;
                    let base = frac.floor();
                    let offs = frac - base;
                    let half = kernel.half_width;
                    let lo = (offs - half).ceil() as isize;
                    let hi = (offs + half).floor() as isize;
                    let w = (lo..=hi).map(|i| kernel.weight(offs - i as f64)).collect();
                    (base as isize + lo, w)
                })
                .collect();
            (0..n_out)
                .map(|j| {
                    let (q, r) = (j / phases, j % phases);
                    let (rel, w) = &table[r];
                    let start = (q * advance) as isize + rel;
                    if start >= 0 && start as usize + w.len() <= n {
                        apply(start as usize, w)
                    } else {
                        let (lo, w) = kernel.taps(j as f64 * step, n);
                        apply(lo, &w)
                    }
                })
                .collect()
        }
        _ => (0..n_out)
            .map(|j| {
                let (lo, w) = kernel.taps(j as f64 * step, n);
                apply(lo, &w)
            })
            .collect(),
    }
}

/// Quantile by linear interpolation between order statistics
/// (`h = (n - 1) q`), on an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, frac) = (h.floor() as usize, h - h.floor());
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub median: f64,
    pub iqr: f64,
}

impl ScaleStats {
    pub fn of(signal: &[f64]) -> Self {
        let mut sorted = signal.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        ScaleStats {
            median: quantile_sorted(&sorted, 0.5),
            iqr: quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25),
        }
    }
}

/// `(x - median) / IQR` clipped to `[-20, 20]`. `None` for a flat channel
/// (zero IQR), which is unusable.
pub fn robust_scale_clip(signal: &[f64]) -> Option<(Vec<f64>, ScaleStats)> {
    if signal.is_empty() {
        return None;
    }
    let stats = ScaleStats::of(signal);
    if !(stats.iqr > 0.0) {
        return None;
    }
    let scaled = signal
        .iter()
        .map(|&x| ((x - stats.median) / stats.iqr).clamp(-CLIP, CLIP))
        .collect();
    Some((scaled, stats))
}

fn crop(samples: &[f64], rate: f64, start_s: f64, end_s: f64) -> Vec<f64> {
    let a = ((start_s * rate).round() as usize).min(samples.len());
    let b = ((end_s * rate).round() as usize).clamp(a, samples.len());
    samples[a..b].to_vec()
}

/// Crops every channel to `[first onset, last onset + duration]`.
pub fn trim_to_hypnogram(recording: &Recording) -> Result<Recording, PreprocessError> {
    let (Some(start), Some(end)) = (recording.hypnogram.start_s(), recording.hypnogram.end_s()) else {
        return Err(PreprocessError::EmptyHypnogram(recording.id.clone()));
    };
    let mut out = recording.clone();
    for ch in &mut out.channels {
        ch.samples = crop(&ch.samples, ch.sample_rate, start, end);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProvenance {
    pub original_rate: f64,
    /// Absent for unusable channels.
    pub scale: Option<ScaleStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedChannel {
    pub derivation: Derivation,
    /// Empty when the channel is unusable.
    pub samples: Vec<f64>,
    pub provenance: ChannelProvenance,
    pub unusable: Option<String>,
}

impl PreprocessedChannel {
    pub fn is_usable(&self) -> bool {
        self.unusable.is_none()
    }
}

/// A recording ready for sampling and prediction: derivation channels at
/// 128 Hz covering exactly `epoch_labels.len()` 30 s epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedRecording {
    pub id: String,
    pub dataset_id: String,
    pub subject: SubjectMeta,
    pub rate: f64,
    pub epoch_labels: Vec<EpochLabel>,
    pub channels: Vec<PreprocessedChannel>,
}

impl PreprocessedRecording {
    pub fn n_epochs(&self) -> usize {
        self.epoch_labels.len()
    }

    pub fn samples_per_epoch(&self) -> usize {
        (EPOCH_SECONDS * self.rate).round() as usize
    }

    /// Indices of usable channels of one modality.
    pub fn usable(&self, modality: crate::psg::Modality) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_usable() && c.derivation.modality == modality)
            .map(|(i, _)| i)
            .collect()
    }

    /// Every usable (EEG, EOG) channel-index pair, EEG-major.
    pub fn channel_pairs(&self) -> Vec<(usize, usize)> {
        let eog = self.usable(crate::psg::Modality::Eog);
        self.usable(crate::psg::Modality::Eeg)
            .into_iter()
            .flat_map(|e| eog.iter().map(move |&o| (e, o)))
            .collect()
    }
}

/// Trim, resample and scale the derived channels of `recording`.
///
/// Labels come from the recording's hypnogram; the signal is cut to whole
/// epochs (a partial trailing epoch is dropped).
pub fn preprocess(
    recording: &Recording,
    derived: &[DerivedChannel],
) -> Result<PreprocessedRecording, PreprocessError> {
    let hyp = &recording.hypnogram;
    let (Some(start), Some(end)) = (hyp.start_s(), hyp.end_s()) else {
        return Err(PreprocessError::EmptyHypnogram(recording.id.clone()));
    };
    let labels = harmonize_labels(hyp);
    let epoch_len = (EPOCH_SECONDS * TARGET_RATE).round() as usize;

    let trimmed: Vec<Vec<f64>> = derived
        .iter()
        .map(|d| resample(&crop(&d.samples, d.sample_rate, start, end), d.sample_rate, TARGET_RATE))
        .collect();
    let shortest_s = derived
        .iter()
        .zip(&trimmed)
        .map(|(d, _)| crop(&d.samples, d.sample_rate, start, end).len() as f64 / d.sample_rate)
        .fold(f64::INFINITY, f64::min);
    if derived.is_empty() {
        return Err(PreprocessError::Ineligible {
            recording: recording.id.clone(),
            reason: "no derivations".into(),
        });
    }
    let n_epochs = ((shortest_s / EPOCH_SECONDS + 1e-9).floor() as usize).min(labels.len());
    if n_epochs == 0 {
        return Err(PreprocessError::Ineligible {
            recording: recording.id.clone(),
            reason: "less than one full epoch of signal inside the hypnogram".into(),
        });
    }
    let n_samples = n_epochs * epoch_len;

    let channels = derived
        .iter()
        .zip(trimmed)
        .map(|(d, mut s)| {
            // resampling rounds the length; fix it to the epoch grid
            s.resize(n_samples, s.last().copied().unwrap_or(0.0));
            let original_rate = d.sample_rate;
            match robust_scale_clip(&s) {
                Some((samples, stats)) => PreprocessedChannel {
                    derivation: d.derivation.clone(),
                    samples,
                    provenance: ChannelProvenance { original_rate, scale: Some(stats) },
                    unusable: None,
                },
                None => PreprocessedChannel {
                    derivation: d.derivation.clone(),
                    samples: Vec::new(),
                    provenance: ChannelProvenance { original_rate, scale: None },
                    unusable: Some("flat signal (zero IQR)".into()),
                },
            }
        })
        .collect();

    Ok(PreprocessedRecording {
        id: recording.id.clone(),
        dataset_id: recording.dataset_id.clone(),
        subject: recording.subject.clone(),
        rate: TARGET_RATE,
        epoch_labels: labels[..n_epochs].to_vec(),
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psg::{parse_hypnogram, Channel, Modality};
    use std::f64::consts::PI;

    #[test]
    fn resample_identity_and_constant() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        assert_eq!(resample(&x, 128.0, 128.0), x);
        let c = vec![3.25; 1000];
        let y = resample(&c, 100.0, 128.0);
        assert_eq!(y.len(), 1280);
        assert!(y.iter().all(|v| (v - 3.25).abs() < 1e-12));
        let y = resample(&c, 256.0, 128.0);
        assert_eq!(y.len(), 500);
        assert!(y.iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn resample_preserves_sine() {
        // 1 Hz sine at 100 Hz -> 128 Hz, compared to the analytic waveform
        let x: Vec<f64> = (0..1000).map(|i| (2.0 * PI * i as f64 / 100.0).sin()).collect();
        let y = resample(&x, 100.0, 128.0);
        let edge = 64;
        let worst = y[edge..y.len() - edge]
            .iter()
            .enumerate()
            .map(|(j, v)| (v - (2.0 * PI * (j + edge) as f64 / 128.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn resample_non_integral_rate() {
        let x: Vec<f64> = (0..2000).map(|i| (2.0 * PI * 3.0 * i as f64 / 99.5).sin()).collect();
        let y = resample(&x, 99.5, 128.0);
        assert_eq!(y.len(), (2000.0f64 * 128.0 / 99.5).round() as usize);
        let worst = y[64..y.len() - 64]
            .iter()
            .enumerate()
            .map(|(j, v)| (v - (2.0 * PI * 3.0 * (j + 64) as f64 / 128.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&s, 0.75), 3.25);
    }

    #[test]
    fn scale_examples() {
        // median 5, IQR 2 (quartiles 4 and 6): value 9 -> 2.0
        let x = [3.0, 4.0, 5.0, 6.0, 7.0, 9.0, 1.0, 5.0, 5.0];
        let st = ScaleStats::of(&x);
        assert_eq!(st.median, 5.0);
        assert_eq!(st.iqr, 2.0);
        let (y, _) = robust_scale_clip(&x).unwrap();
        assert_eq!(y[5], 2.0);
        assert_eq!(y[2], 0.0);
        let mut x: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        x.push(1e6);
        x.push(-1e6);
        let (y, st) = robust_scale_clip(&x).unwrap();
        assert!(y.iter().all(|v| v.abs() <= 20.0));
        assert_eq!(y[101], 20.0);
        assert_eq!(y[102], -20.0);
        assert!((st.median - 0.5).abs() < 1e-12);
        assert!(robust_scale_clip(&[1.0; 10]).is_none());
    }

    #[test]
    fn labels_harmonize() {
        let h = parse_hypnogram("0 30 N4\n30 30 MOVEMENT\n60 30 UNKNOWN\n90 30 W\n120 30 N1\n150 30 N2\n180 30 N3\n210 30 REM").unwrap();
        let l = harmonize_labels(&h);
        use SleepClass::*;
        assert_eq!(l, vec![Some(N3), None, None, Some(W), Some(N1), Some(N2), Some(N3), Some(Rem)]);
    }

    fn rec(seconds: usize, hyp: &str) -> Recording {
        Recording {
            id: "r".into(),
            dataset_id: "d".into(),
            channels: vec![Channel {
                label: "C4".into(),
                sample_rate: 10.0,
                samples: (0..seconds * 10).map(|i| i as f64).collect(),
            }],
            hypnogram: parse_hypnogram(hyp).unwrap(),
            subject: SubjectMeta::new("s"),
        }
    }

    #[test]
    fn trimming() {
        let r = rec(400, "0 300 W");
        assert_eq!(trim_to_hypnogram(&r).unwrap().channels[0].samples.len(), 3000);
        let r = rec(300, "0 300 W");
        assert_eq!(trim_to_hypnogram(&r).unwrap(), r);
        let r = rec(400, "30 300 W");
        let t = trim_to_hypnogram(&r).unwrap();
        assert_eq!(t.channels[0].samples[0], 300.0);
        assert_eq!(t.channels[0].samples.len(), 3000);
        let mut r = rec(10, "0 30 W");
        r.hypnogram = Hypnogram::default();
        assert!(matches!(trim_to_hypnogram(&r), Err(PreprocessError::EmptyHypnogram(_))));
    }

    #[test]
    fn full_pipeline_shapes_and_flat_channels() {
        let r = rec(100, "0 90 N2\n90 30 W");
        let derived = vec![
            DerivedChannel {
                derivation: Derivation { positive: "C4".into(), negative: Some("M1".into()), modality: Modality::Eeg, recommended: true },
                sample_rate: 10.0,
                samples: (0..1000).map(|i| ((i * 37) % 101) as f64).collect(),
            },
            DerivedChannel {
                derivation: Derivation { positive: "E1".into(), negative: Some("M2".into()), modality: Modality::Eog, recommended: true },
                sample_rate: 10.0,
                samples: vec![1.0; 1000],
            },
        ];
        let p = preprocess(&r, &derived).unwrap();
        // 100 s of signal -> 3 whole epochs although the hypnogram has 4
        assert_eq!(p.n_epochs(), 3);
        assert_eq!(p.channels[0].samples.len(), 3 * 3840);
        assert!(p.channels[0].is_usable());
        assert!(!p.channels[1].is_usable());
        assert!(p.channel_pairs().is_empty());
    }
}
