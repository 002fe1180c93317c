//! Confusion matrices, F1 scores, Cohen's kappa and majority voting.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::preprocess::{EpochLabel, SleepClass, N_CLASSES};

/// Rows are the reference stage, columns the prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl Confusion {
    /// Masked reference epochs are skipped.
    pub fn from_pairs(truth: &[EpochLabel], predicted: &[SleepClass]) -> Result<Self, EvalError> {
        if truth.len() != predicted.len() {
            return Err(EvalError::Length { expected: truth.len(), found: predicted.len() });
        }
        let mut c = Confusion::default();
        for (t, p) in truth.iter().zip(predicted) {
            if let Some(t) = t {
                c.counts[t.index()][p.index()] += 1;
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &Confusion) {
        for i in 0..N_CLASSES {
            for j in 0..N_CLASSES {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_f1: [f64; N_CLASSES],
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub kappa: f64,
}

/// `F1_c = 2TP / (2TP + FP + FN)` with 0/0 = 0, the unweighted and
/// support-weighted means over the five classes, and Cohen's kappa
/// (reported as 1 when chance agreement is 1).
pub fn metrics(c: &Confusion) -> Result<Metrics, EvalError> {
    let n = c.total();
    if n == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let mut per_class_f1 = [0.0; N_CLASSES];
    for (k, f1) in per_class_f1.iter_mut().enumerate() {
        let tp = c.counts[k][k];
        let fp = c.predicted(k) - tp;
        let fn_ = c.support(k) - tp;
        let den = 2 * tp + fp + fn_;
        *f1 = if den == 0 { 0.0 } else { (2 * tp) as f64 / den as f64 };
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / N_CLASSES as f64;
    let weighted_f1 = (0..N_CLASSES).map(|k| per_class_f1[k] * c.support(k) as f64).sum::<f64>() / n as f64;
    let nf = n as f64;
    let p_o = (0..N_CLASSES).map(|k| c.counts[k][k]).sum::<u64>() as f64 / nf;
    let p_e = (0..N_CLASSES).map(|k| c.support(k) as f64 * c.predicted(k) as f64).sum::<f64>() / (nf * nf);
    let kappa = if p_e >= 1.0 { 1.0 } else { (p_o - p_e) / (1.0 - p_e) };
    Ok(Metrics { per_class_f1, macro_f1, weighted_f1, kappa })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Order-independent sum.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Per-epoch plurality of the streams' argmax labels. Ties go to the
/// highest mean probability among the tied classes, then the lowest class
/// index. Each stream is `L` rows of `K` probabilities, flattened.
pub fn majority_vote(streams: &[Vec<f64>]) -> Result<Vec<SleepClass>, EvalError> {
    let first = streams.first().ok_or(EvalError::NoStreams)?;
    for s in streams {
        if s.len() != first.len() {
            return Err(EvalError::Length { expected: first.len(), found: s.len() });
        }
    }
    if first.len() % N_CLASSES != 0 {
        return Err(EvalError::Length { expected: first.len().next_multiple_of(N_CLASSES), found: first.len() });
    }
    let epochs = first.len() / N_CLASSES;
    let mut out = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let rows: Vec<&[f64]> = streams.iter().map(|s| &s[e * N_CLASSES..(e + 1) * N_CLASSES]).collect();
        let mut votes = [0usize; N_CLASSES];
        for r in &rows {
            votes[argmax(r)] += 1;
        }
        let top = *votes.iter().max().expect("five classes");
        let mut winner = None::<(usize, f64)>;
        for k in (0..N_CLASSES).filter(|&k| votes[k] == top) {
            let mean = stable_sum(rows.iter().map(|r| r[k]).collect()) / rows.len() as f64;
            if winner.is_none_or(|(_, m)| mean > m) {
                winner = Some((k, mean));
            }
        }
        out.push(SleepClass::from_index(winner.expect("a top class").0).expect("class index"));
    }
    Ok(out)
}
