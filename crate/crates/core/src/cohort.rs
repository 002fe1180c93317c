//! Dataset manifests, subject/family-level splits and age grouping.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("split needs at least 3 subjects or families, found {0}")]
    TooFewUnits(usize),
    #[error("negative age {0}")]
    NegativeAge(f64),
    #[error("recording `{0}` has no age, required when G > 1")]
    MissingAge(String),
    #[error("unsupported group count {0} (expected 1, 2 or 7)")]
    BadGroupCount(usize),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    /// Store directory of the recording, relative to the store root.
    pub path: String,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_years: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    pub recordings: Vec<RecordingEntry>,
}

impl DatasetManifest {
    pub fn new(dataset_id: impl Into<String>) -> Self {
        DatasetManifest { dataset_id: dataset_id.into(), split_seed: None, recordings: Vec::new() }
    }

    pub fn load(path: &Path) -> Result<Self, CohortError> {
        let io = |reason: String| CohortError::Io { path: path.display().to_string(), reason };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CohortError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|e| CohortError::Io { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &RecordingEntry> {
        self.recordings.iter().filter(move |r| r.split == Some(split))
    }
}

/// `(val, test)` unit counts for a cohort of `n` units: 10% capped at 50
/// and 15% capped at 100, both floored.
pub fn split_counts(n: usize) -> (usize, usize) {
    ((n / 10).min(50), (n * 15 / 100).min(100))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups recordings that share a subject or a family id. Returns one
/// list of recording indices per unit, in first-appearance order.
pub fn split_units(manifest: &DatasetManifest) -> Vec<Vec<usize>> {
    let n = manifest.recordings.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut first: BTreeMap<(u8, &str), usize> = BTreeMap::new();
    for (i, r) in manifest.recordings.iter().enumerate() {
        let keys = std::iter::once((0u8, r.subject_id.as_str())).chain(r.family_id.as_deref().map(|f| (1u8, f)));
        for key in keys {
            match first.get(&key) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    first.insert(key, i);
                }
            }
        }
    }
    let mut units: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        units.entry(root).or_default().push(i);
    }
    units.into_values().collect()
}

/// Random unit-level assignment to train/val/test. Units are families
/// where family ids link subjects, otherwise subjects.
pub fn split<R: Rng + ?Sized>(manifest: &DatasetManifest, rng: &mut R) -> Result<DatasetManifest, CohortError> {
    let mut units = split_units(manifest);
    if units.len() < 3 {
        return Err(CohortError::TooFewUnits(units.len()));
    }
    units.shuffle(rng);
    let (n_val, n_test) = split_counts(units.len());
    let mut out = manifest.clone();
    for (k, unit) in units.iter().enumerate() {
        let s = if k < n_val {
            Split::Val
        } else if k < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        for &i in unit {
            out.recordings[i].split = Some(s);
        }
    }
    Ok(out)
}

/// Age-group partition for conditioning: 1, 2 or 7 groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeGroupScheme {
    g: usize,
}

pub const AGE_GROUPS_7: [&str; 7] = ["B", "C", "A", "YA", "MA", "E", "OE"];
const AGE_UPPER_7: [u32; 6] = [3, 12, 18, 39, 59, 69];

impl AgeGroupScheme {
    pub fn new(g: usize) -> Result<Self, CohortError> {
        match g {
            1 | 2 | 7 => Ok(AgeGroupScheme { g }),
            _ => Err(CohortError::BadGroupCount(g)),
        }
    }

    pub fn groups(self) -> usize {
        self.g
    }

    pub fn name(self, group: usize) -> &'static str {
        match self.g {
            1 => "ALL",
            2 => ["B+C", "A..OE"][group],
            _ => AGE_GROUPS_7[group],
        }
    }
}

fn group7(age: f64) -> usize {
    let years = age.floor() as u32;
    AGE_UPPER_7.iter().position(|&hi| years <= hi).unwrap_or(6)
}

/// Group index of an age in whole years (fractions are floored).
/// Missing ages map to group 0 only when G = 1.
pub fn age_group(age_years: Option<f64>, scheme: AgeGroupScheme, recording: &str) -> Result<usize, CohortError> {
    let age = match age_years {
        Some(a) if a < 0.0 || a.is_nan() => return Err(CohortError::NegativeAge(a)),
        Some(a) => a,
        None if scheme.g == 1 => return Ok(0),
        None => return Err(CohortError::MissingAge(recording.to_string())),
    };
    Ok(match scheme.g {
        1 => 0,
        2 => usize::from(group7(age) >= 2),
        _ => group7(age),
    })
}
