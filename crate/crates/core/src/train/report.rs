//! Evaluation reports: per-recording rows, group aggregates and CSV
//! round-tripping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::predict::score_all;
use super::{metrics, paired_ttest, Confusion, EvalError, EvalRecording, Metrics, Sides, TTest};
use crate::model::UNet;
use crate::preprocess::{SleepClass, N_CLASSES};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingResult {
    pub id: String,
    pub group: String,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

impl RecordingResult {
    pub fn scored_epochs(&self) -> u64 {
        self.confusion.total()
    }
}

/// Mean and sample standard deviation (n - 1; 0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Aggregate { n, mean, sd })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<RecordingResult>,
    /// Recordings without any scored epoch.
    pub skipped: Vec<String>,
}

/// Scores each recording by majority vote. `group_names[g]` labels group
/// `g` in the report; missing names fall back to the index.
pub fn evaluate<T: Real>(
    model: &UNet<T>,
    recordings: &[EvalRecording],
    group_names: &[String],
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for score in score_all(model, recordings)? {
        let group = group_names.get(score.group).cloned().unwrap_or_else(|| score.group.to_string());
        match score.metrics {
            Some(metrics) => rows.push(RecordingResult { id: score.id, group, confusion: score.confusion, metrics }),
            None => skipped.push(score.id),
        }
    }
    Ok(EvalReport { rows, skipped })
}

const CLASS_COLUMNS: [&str; N_CLASSES] = ["f1_W", "f1_N1", "f1_N2", "f1_N3", "f1_REM"];

impl EvalReport {
    pub fn macro_f1(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.metrics.macro_f1).collect()
    }

    /// Macro F1 across recordings.
    pub fn overall(&self) -> Option<Aggregate> {
        Aggregate::of(&self.macro_f1())
    }

    /// Macro F1 across recordings of each group, in name order.
    pub fn per_group(&self) -> BTreeMap<String, Aggregate> {
        let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            by.entry(r.group.clone()).or_default().push(r.metrics.macro_f1);
        }
        by.into_iter().filter_map(|(g, v)| Aggregate::of(&v).map(|a| (g, a))).collect()
    }

    /// Sum of the per-recording confusion matrices.
    pub fn pooled(&self) -> Confusion {
        let mut c = Confusion::default();
        for r in &self.rows {
            c.add(&r.confusion);
        }
        c
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>7} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}",
            "recording", "group", "epochs", "W", "N1", "N2", "N3", "REM", "macro", "wF1", "kappa"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = write!(s, "{:<24} {:>6} {:>7}", r.id, r.group, r.scored_epochs());
            for f in m.per_class_f1 {
                let _ = write!(s, " {f:>6.3}");
            }
            let _ = writeln!(s, " {:>7.4} {:>7.4} {:>7.4}", m.macro_f1, m.weighted_f1, m.kappa);
        }
        if let Some(a) = self.overall() {
            let _ = writeln!(s, "\nmacro F1 over {} recordings: {:.4} ± {:.4}", a.n, a.mean, a.sd);
        }
        for (g, a) in self.per_group() {
            let _ = writeln!(s, "  group {g:<6} n={:<4} {:.4} ± {:.4}", a.n, a.mean, a.sd);
        }
        let pooled = self.pooled();
        if let Ok(m) = metrics(&pooled) {
            let _ = writeln!(s, "\npooled confusion (rows = reference, columns = predicted):");
            let _ = write!(s, "{:>6}", "");
            for c in SleepClass::ALL {
                let _ = write!(s, " {:>7}", c.token());
            }
            s.push('\n');
            for c in SleepClass::ALL {
                let _ = write!(s, "{:>6}", c.token());
                for v in pooled.counts[c.index()] {
                    let _ = write!(s, " {v:>7}");
                }
                s.push('\n');
            }
            let _ = writeln!(s, "pooled macro F1 {:.4}, weighted F1 {:.4}, kappa {:.4}", m.macro_f1, m.weighted_f1, m.kappa);
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "\nskipped (no scored epochs): {}", self.skipped.join(", "));
        }
        s
    }

    /// One row per recording; the trailing 25 columns are the confusion
    /// matrix in row-major order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,group");
        for c in CLASS_COLUMNS {
            s.push(',');
            s.push_str(c);
        }
        s.push_str(",macro_f1,weighted_f1,kappa");
        for t in SleepClass::ALL {
            for p in SleepClass::ALL {
                let _ = write!(s, ",c_{}_{}", t.token(), p.token());
            }
        }
        s.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = write!(s, "{},{}", r.id, r.group);
            for f in m.per_class_f1 {
                let _ = write!(s, ",{f:.17}");
            }
            let _ = write!(s, ",{:.17},{:.17},{:.17}", m.macro_f1, m.weighted_f1, m.kappa);
            for v in r.confusion.counts.iter().flatten() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Rebuilds the rows from [`EvalReport::to_csv`]; metrics are recomputed
    /// from the stored confusion matrices.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty report")?;
        let expected = 2 + N_CLASSES + 3 + N_CLASSES * N_CLASSES;
        if header.split(',').count() != expected {
            return Err(format!("header has {} columns, expected {expected}", header.split(',').count()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != expected {
                return Err(format!("row {}: {} columns, expected {expected}", i + 1, cols.len()));
            }
            let mut confusion = Confusion::default();
            for (k, v) in cols[expected - N_CLASSES * N_CLASSES..].iter().enumerate() {
                confusion.counts[k / N_CLASSES][k % N_CLASSES] =
                    v.parse().map_err(|_| format!("row {}: bad count {v:?}", i + 1))?;
            }
            let metrics = metrics(&confusion).map_err(|e| format!("row {}: {e}", i + 1))?;
            rows.push(RecordingResult { id: cols[0].to_string(), group: cols[1].to_string(), confusion, metrics });
        }
        Ok(EvalReport { rows, skipped: Vec::new() })
    }

    /// Macro F1 of both reports aligned by recording id. The two reports
    /// must cover the same recordings.
    pub fn paired_scores(&self, other: &EvalReport) -> Result<Vec<(String, f64, f64)>, EvalError> {
        let theirs: BTreeMap<&str, &RecordingResult> = other.rows.iter().map(|r| (r.id.as_str(), r)).collect();
        if theirs.len() != self.rows.len() {
            return Err(EvalError::Length { expected: self.rows.len(), found: theirs.len() });
        }
        let mut out = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            let o = theirs.get(r.id.as_str()).ok_or_else(|| EvalError::UnpairedRecording(r.id.clone()))?;
            out.push((r.group.clone(), r.metrics.macro_f1, o.metrics.macro_f1));
        }
        Ok(out)
    }
}

/// Macro F1 of two runs over the recordings of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupComparison {
    pub group: String,
    pub a: Aggregate,
    pub b: Aggregate,
    /// Two-sided paired t-test; `None` with fewer than two recordings.
    pub test: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub overall: GroupComparison,
    pub groups: Vec<GroupComparison>,
}

fn compare_group(group: &str, pairs: &[(f64, f64)]) -> Option<GroupComparison> {
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Some(GroupComparison {
        group: group.to_string(),
        a: Aggregate::of(&a)?,
        b: Aggregate::of(&b)?,
        test: paired_ttest(&a, &b, Sides::Two).ok(),
    })
}

/// Pairs two reports by recording id. Both must cover exactly the same
/// recordings; groups follow the first report.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison, EvalError> {
    let ids = |r: &EvalReport| r.rows.iter().map(|x| x.id.clone()).collect::<std::collections::BTreeSet<_>>();
    let (ia, ib) = (ids(a), ids(b));
    if ia != ib {
        return Err(EvalError::RecordingSetMismatch {
            only_a: ia.difference(&ib).cloned().collect(),
            only_b: ib.difference(&ia).cloned().collect(),
        });
    }
    let pairs = a.paired_scores(b)?;
    if pairs.is_empty() {
        return Err(EvalError::TooFewPairs(0));
    }
    let mut by: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (g, x, y) in &pairs {
        by.entry(g.as_str()).or_default().push((*x, *y));
    }
    let all: Vec<(f64, f64)> = pairs.iter().map(|p| (p.1, p.2)).collect();
    let overall = compare_group("all", &all).expect("non-empty");
    let groups = by.iter().filter_map(|(g, v)| compare_group(g, v)).collect();
    Ok(Comparison { overall, groups })
}

impl Comparison {
    /// One row per group: `mean ± sd` of both runs, then t and p.
    pub fn to_text(&self, name_a: &str, name_b: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>4} {:>17} {:>17} {:>9} {:>8}", "group", "n", name_a, name_b, "t", "p");
        for g in self.groups.iter().chain(std::iter::once(&self.overall)) {
            let cell = |a: &Aggregate| format!("{:.3} ± {:.3}", a.mean, a.sd);
            let (t, p) = match &g.test {
                Some(t) if t.degenerate && t.mean_diff == 0.0 => ("identical".to_string(), "-".to_string()),
                Some(t) => (format!("{:.3}", t.t), format!("{:.4}", t.p)),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(s, "{:<8} {:>4} {:>17} {:>17} {:>9} {:>8}", g.group, g.a.n, cell(&g.a), cell(&g.b), t, p);
        }
        s
    }
}
