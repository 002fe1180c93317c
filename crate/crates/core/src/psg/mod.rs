//! Polysomnography recordings: EDF files, scored hypnograms and the
//! EEG/EOG derivations fed to the network.

pub mod derivation;
pub mod edf;
pub mod hypnogram;

pub use derivation::{
    build_derivations, DerivationConfig, DerivationError, DerivationMode, DerivedChannel,
    Derivation, ElectrodeKind, Modality,
};
pub use edf::{parse_edf, write_edf, EdfError, EdfFile, EdfHeader, EdfSignal, SignalHeader};
pub use hypnogram::{parse_hypnogram, Hypnogram, HypnogramEntry, HypnogramError, Stage, EPOCH_SECONDS};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub label: String,
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

impl Channel {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_years: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
}

impl SubjectMeta {
    pub fn new(subject_id: impl Into<String>) -> Self {
        SubjectMeta {
            subject_id: subject_id.into(),
            ..Default::default()
        }
    }
}

/// A raw multichannel recording with its (possibly empty) hypnogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    pub dataset_id: String,
    pub channels: Vec<Channel>,
    pub hypnogram: Hypnogram,
    pub subject: SubjectMeta,
}

impl Recording {
    pub fn channel(&self, label: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub fn with_hypnogram(mut self, hypnogram: Hypnogram) -> Self {
        self.hypnogram = hypnogram;
        self
    }

    /// Checks label uniqueness.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.channels {
            if !seen.insert(c.label.as_str()) {
                return Err(format!("duplicate channel label `{}`", c.label));
            }
            if !(c.sample_rate > 0.0) {
                return Err(format!("channel `{}` has non-positive rate", c.label));
            }
        }
        Ok(())
    }
}
