//! On-disk store of preprocessed recordings.
//!
//! One directory per recording under the store root:
//!
//! ```text
//! <root>/<recording id>/
//!     manifest.json   subject, rates, per-channel scale provenance
//!     00_C4-M1.f32    raw little-endian f32 samples, one file per channel
//!     labels.txt      one class token (or MASK) per 30 s epoch
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{label_token, parse_label_token, ChannelProvenance, PreprocessedChannel, PreprocessedRecording};
use crate::psg::{Derivation, SubjectMeta};

pub const STORE_ENV: &str = "USLEEP_STORE";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub file: String,
    pub derivation: Derivation,
    #[serde(flatten)]
    pub provenance: ChannelProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unusable: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub id: String,
    pub dataset_id: String,
    pub subject: SubjectMeta,
    pub rate: f64,
    pub n_epochs: usize,
    pub channels: Vec<ChannelEntry>,
}

/// Keeps file names portable.
fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RecordingStore {
    root: PathBuf,
}

impl RecordingStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RecordingStore { root: root.into() }
    }

    /// Root from `$USLEEP_STORE`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(STORE_ENV).map(|p| Self::new(PathBuf::from(p)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn recording_dir(&self, id: &str) -> PathBuf {
        self.root.join(sanitize(id))
    }

    pub fn write(&self, rec: &PreprocessedRecording) -> Result<PathBuf> {
        let dir = self.recording_dir(&rec.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut channels = Vec::with_capacity(rec.channels.len());
        for (i, ch) in rec.channels.iter().enumerate() {
            let file = format!("{i:02}_{}.f32", sanitize(&ch.derivation.label()));
            let bytes: Vec<u8> = ch.samples.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(io_err(&path))?;
            channels.push(ChannelEntry {
                file,
                derivation: ch.derivation.clone(),
                provenance: ch.provenance.clone(),
                unusable: ch.unusable.clone(),
            });
        }
        let manifest = RecordingManifest {
            id: rec.id.clone(),
            dataset_id: rec.dataset_id.clone(),
            subject: rec.subject.clone(),
            rate: rec.rate,
            n_epochs: rec.n_epochs(),
            channels,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(io_err(&path))?;
        let labels: String = rec.epoch_labels.iter().map(|&l| format!("{}\n", label_token(l))).collect();
        let path = dir.join("labels.txt");
        fs::write(&path, labels).map_err(io_err(&path))?;
        Ok(dir)
    }

    pub fn read_manifest(&self, id: &str) -> Result<RecordingManifest> {
        read_manifest(&self.recording_dir(id))
    }

    pub fn read(&self, id: &str) -> Result<PreprocessedRecording> {
        read_recording(&self.recording_dir(id))
    }

    /// Ids of every recording directory under the root, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let manifest = entry.path().join("manifest.json");
            if manifest.is_file() {
                ids.push(read_manifest(&entry.path())?.id);
            }
        }
        ids.sort();
        Ok(ids)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RecordingManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| StoreError::Manifest { path, source })
}

pub fn read_recording(dir: &Path) -> Result<PreprocessedRecording> {
    let manifest = read_manifest(dir)?;
    let path = dir.join("labels.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut epoch_labels = Vec::with_capacity(manifest.n_epochs);
    for (i, line) in text.lines().enumerate() {
        let tok = line.trim();
        let label = parse_label_token(tok).ok_or_else(|| StoreError::Format {
            path: path.clone(),
            reason: format!("line {}: bad label {tok:?}", i + 1),
        })?;
        epoch_labels.push(label);
    }
    if epoch_labels.len() != manifest.n_epochs {
        return Err(StoreError::Format {
            path,
            reason: format!("{} labels, manifest says {}", epoch_labels.len(), manifest.n_epochs),
        });
    }
    let expected = (manifest.n_epochs as f64 * crate::psg::EPOCH_SECONDS * manifest.rate).round() as usize;
    let mut channels = Vec::with_capacity(manifest.channels.len());
    for entry in manifest.channels {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() % 4 != 0 {
            return Err(StoreError::Format { path, reason: "length is not a multiple of 4 bytes".into() });
        }
        let samples: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let want = if entry.unusable.is_some() { 0 } else { expected };
        if samples.len() != want {
            return Err(StoreError::Format {
                path,
                reason: format!("{} samples, expected {want}", samples.len()),
            });
        }
        channels.push(PreprocessedChannel {
            derivation: entry.derivation,
            samples,
            provenance: entry.provenance,
            unusable: entry.unusable,
        });
    }
    Ok(PreprocessedRecording {
        id: manifest.id,
        dataset_id: manifest.dataset_id,
        subject: manifest.subject,
        rate: manifest.rate,
        epoch_labels,
        channels,
    })
}
