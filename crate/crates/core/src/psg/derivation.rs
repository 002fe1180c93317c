//! EEG/EOG derivations: the electrode differences that become network
//! input channels.
//!
//! Two construction modes exist. `aasm` emits only the configured
//! recommended montages that the recording can form. `atypical` draws
//! random ordered electrode pairs instead, reproducing a pipeline that
//! ignores the recommended montages.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Channel, Recording};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Eeg,
    Eog,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Eeg => "EEG",
            Modality::Eog => "EOG",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "EEG" => Ok(Modality::Eeg),
            "EOG" => Ok(Modality::Eog),
            _ => Err(format!("unknown modality {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElectrodeKind {
    Eeg,
    Eog,
    Mastoid,
    Other,
}

/// Classifies a canonical (upper-case) electrode name.
pub fn electrode_kind(name: &str) -> ElectrodeKind {
    match name {
        "M1" | "M2" | "A1" | "A2" => return ElectrodeKind::Mastoid,
        "E1" | "E2" | "LOC" | "ROC" => return ElectrodeKind::Eog,
        _ => {}
    }
    // 10-20 / 10-10 positions: region prefix followed by a number or Z.
    const REGIONS: [&str; 13] = ["FP", "AF", "FC", "FT", "CP", "TP", "PO", "F", "C", "T", "P", "O", "I"];
    for r in REGIONS {
        if let Some(rest) = name.strip_prefix(r) {
            if rest == "Z" || (!rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit())) {
                return ElectrodeKind::Eeg;
            }
        }
    }
    ElectrodeKind::Other
}

/// Upper-cases an EDF label and strips the usual modality prefix and
/// `-REF` suffix: `"EEG C4-Ref"` becomes `"C4"`.
pub fn canonical_label(label: &str) -> String {
    let mut s = label.trim().to_ascii_uppercase();
    for prefix in ["EEG ", "EOG ", "EMG "] {
        if let Some(rest) = s.strip_prefix(prefix) {
            s = rest.trim().to_string();
        }
    }
    for suffix in ["-REF", ":REF"] {
        if let Some(rest) = s.strip_suffix(suffix) {
            s = rest.trim().to_string();
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Derivation {
    pub positive: String,
    /// `None` is the recording reference.
    pub negative: Option<String>,
    pub modality: Modality,
    pub recommended: bool,
}

impl Derivation {
    pub fn label(&self) -> String {
        format!("{}-{}", self.positive, self.negative.as_deref().unwrap_or("REF"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivedChannel {
    pub derivation: Derivation,
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivationMode {
    Aasm,
    Atypical,
}

impl FromStr for DerivationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aasm" => Ok(DerivationMode::Aasm),
            "atypical" => Ok(DerivationMode::Atypical),
            _ => Err(format!("unknown derivation mode {s:?} (expected aasm|atypical)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DerivationError {
    #[error("recording `{recording}` is ineligible: {reason}")]
    Ineligible { recording: String, reason: String },
    #[error("derivation {label}: {reason}")]
    Signal { label: String, reason: String },
    #[error("derivation config line {line}: {reason}")]
    Config { line: usize, reason: String },
}

/// The recommended montage list, one `MODALITY POS NEG` entry per line.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivationConfig {
    pub entries: Vec<(Modality, String, Option<String>)>,
}

impl Default for DerivationConfig {
    fn default() -> Self {
        let pair = |m, p: &str, n: &str| (m, p.to_string(), Some(n.to_string()));
        DerivationConfig {
            entries: vec![
                pair(Modality::Eeg, "F4", "M1"),
                pair(Modality::Eeg, "C4", "M1"),
                pair(Modality::Eeg, "O2", "M1"),
                pair(Modality::Eeg, "F3", "M2"),
                pair(Modality::Eeg, "C3", "M2"),
                pair(Modality::Eeg, "O1", "M2"),
                pair(Modality::Eog, "E1", "M2"),
                pair(Modality::Eog, "E2", "M2"),
            ],
        }
    }
}

impl DerivationConfig {
    pub fn parse(text: &str) -> Result<Self, DerivationError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| DerivationError::Config { line: i + 1, reason };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(err(format!("expected `MODALITY POS NEG`, got {line:?}")));
            }
            let modality = cols[0].parse().map_err(err)?;
            let pos = canonical_label(cols[1]);
            let neg = match canonical_label(cols[2]).as_str() {
                "REF" => None,
                n => Some(n.to_string()),
            };
            if neg.as_deref() == Some(pos.as_str()) {
                return Err(err(format!("self-pair {pos}-{pos}")));
            }
            entries.push((modality, pos, neg));
        }
        Ok(DerivationConfig { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(m, p, n)| format!("{m} {p} {}\n", n.as_deref().unwrap_or("REF")))
            .collect()
    }

    fn is_recommended(&self, modality: Modality, pos: &str, neg: Option<&str>) -> bool {
        self.entries
            .iter()
            .any(|(m, p, n)| *m == modality && p == pos && n.as_deref() == neg)
    }
}

/// Signals available in a recording, indexed by electrode.
struct Sources<'a> {
    referential: BTreeMap<String, &'a Channel>,
    bipolar: BTreeMap<(String, String), &'a Channel>,
}

impl<'a> Sources<'a> {
    fn new(rec: &'a Recording) -> Self {
        let mut referential = BTreeMap::new();
        let mut bipolar = BTreeMap::new();
        for ch in &rec.channels {
            let name = canonical_label(&ch.label);
            if electrode_kind(&name) != ElectrodeKind::Other {
                referential.insert(name, ch);
            } else if let Some((p, n)) = name.split_once('-') {
                let (p, n) = (p.trim().to_string(), n.trim().to_string());
                if electrode_kind(&p) != ElectrodeKind::Other && electrode_kind(&n) != ElectrodeKind::Other {
                    bipolar.insert((p, n), ch);
                }
            }
        }
        Sources { referential, bipolar }
    }

    fn electrodes(&self, kinds: &[ElectrodeKind]) -> Vec<&str> {
        self.referential
            .keys()
            .filter(|k| kinds.contains(&electrode_kind(k)))
            .map(String::as_str)
            .collect()
    }

    fn can_form(&self, pos: &str, neg: Option<&str>) -> bool {
        match neg {
            None => self.referential.contains_key(pos),
            Some(n) => {
                (self.referential.contains_key(pos) && self.referential.contains_key(n))
                    || self.bipolar.contains_key(&(pos.to_string(), n.to_string()))
                    || self.bipolar.contains_key(&(n.to_string(), pos.to_string()))
            }
        }
    }

    fn form(&self, d: Derivation) -> Result<DerivedChannel, DerivationError> {
        let label = d.label();
        let err = |reason: String| DerivationError::Signal { label: label.clone(), reason };
        let pos = d.positive.as_str();
        let (rate, samples) = match d.negative.as_deref() {
            None => {
                let c = self.referential.get(pos).ok_or_else(|| err("electrode missing".into()))?;
                (c.sample_rate, c.samples.clone())
            }
            Some(neg) => {
                if let (Some(a), Some(b)) = (self.referential.get(pos), self.referential.get(neg)) {
                    if a.sample_rate != b.sample_rate || a.samples.len() != b.samples.len() {
                        return Err(err(format!(
                            "electrodes sampled differently ({} Hz x {} vs {} Hz x {})",
                            a.sample_rate,
                            a.samples.len(),
                            b.sample_rate,
                            b.samples.len()
                        )));
                    }
                    let s = a.samples.iter().zip(&b.samples).map(|(x, y)| x - y).collect();
                    (a.sample_rate, s)
                } else if let Some(c) = self.bipolar.get(&(pos.to_string(), neg.to_string())) {
                    (c.sample_rate, c.samples.clone())
                } else if let Some(c) = self.bipolar.get(&(neg.to_string(), pos.to_string())) {
                    (c.sample_rate, c.samples.iter().map(|v| -v).collect())
                } else {
                    return Err(err("electrode pair not present".into()));
                }
            }
        };
        Ok(DerivedChannel {
            derivation: d,
            sample_rate: rate,
            samples,
        })
    }
}

/// Builds the EEG and EOG derivations for one recording.
///
/// In atypical mode, the number of pairs drawn per modality equals the
/// number of recommended pairs the recording could form (at least one).
/// Pairs are drawn without replacement: EEG positives against EEG or
/// mastoid negatives, EOG positives against any other electrode. A drawn
/// pair that happens to be in the recommended list is tagged as such.
pub fn build_derivations<R: Rng + ?Sized>(
    recording: &Recording,
    mode: DerivationMode,
    config: &DerivationConfig,
    rng: &mut R,
) -> Result<Vec<DerivedChannel>, DerivationError> {
    let src = Sources::new(recording);
    let ineligible = |reason: &str| DerivationError::Ineligible {
        recording: recording.id.clone(),
        reason: reason.into(),
    };
    let recommended: Vec<Derivation> = config
        .entries
        .iter()
        .filter(|(_, p, n)| src.can_form(p, n.as_deref()))
        .map(|(m, p, n)| Derivation {
            positive: p.clone(),
            negative: n.clone(),
            modality: *m,
            recommended: true,
        })
        .collect();
    let count = |m: Modality| recommended.iter().filter(|d| d.modality == m).count();

    let chosen = match mode {
        DerivationMode::Aasm => {
            if count(Modality::Eeg) == 0 {
                return Err(ineligible("no recommended EEG derivation can be formed"));
            }
            if count(Modality::Eog) == 0 {
                return Err(ineligible("no recommended EOG derivation can be formed"));
            }
            recommended.clone()
        }
        DerivationMode::Atypical => {
            use ElectrodeKind::*;
            let eeg = src.electrodes(&[Eeg]);
            let eog = src.electrodes(&[Eog]);
            if eeg.is_empty() {
                return Err(ineligible("no EEG electrodes"));
            }
            if eog.is_empty() {
                return Err(ineligible("no EOG electrodes"));
            }
            let eeg_neg = src.electrodes(&[Eeg, Mastoid]);
            let any = src.electrodes(&[Eeg, Eog, Mastoid]);
            let mut out = Vec::new();
            for (modality, positives, negatives) in [(Modality::Eeg, &eeg, &eeg_neg), (Modality::Eog, &eog, &any)] {
                let candidates: Vec<(&str, &str)> = positives
                    .iter()
                    .flat_map(|&p| negatives.iter().filter(move |&&n| n != p).map(move |&n| (p, n)))
                    .collect();
                if candidates.is_empty() {
                    return Err(ineligible(&format!("no {modality} electrode pair can be formed")));
                }
                let k = count(modality).max(1).min(candidates.len());
                for i in rand::seq::index::sample(rng, candidates.len(), k) {
                    let (p, n) = candidates[i];
                    out.push(Derivation {
                        positive: p.to_string(),
                        negative: Some(n.to_string()),
                        modality,
                        recommended: config.is_recommended(modality, p, Some(n)),
                    });
                }
            }
            out
        }
    };
    chosen.into_iter().map(|d| src.form(d)).collect()
}
