//! Store layout, dataset manifests and run directories.
//!
//! ```text
//! $USLEEP_STORE/
//!     <recording>/            one directory per preprocessed recording
//!     manifests/<dataset>.json
//!     runs/<timestamp>-<regime>-seed<seed>/
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use usleep::cohort::{age_group, AgeGroupScheme, DatasetManifest, RecordingEntry, Split};
use usleep::preprocess::PreprocessedRecording;
use usleep::sampler::{SamplerDataset, SamplerRecording};
use usleep::store::{read_recording, RecordingStore};
use usleep::train::EvalRecording;

use crate::error::{data, CliError, Result};

pub fn open_store(root: Option<PathBuf>) -> Result<RecordingStore> {
    let root = root.ok_or_else(|| CliError::Config("no store root: set USLEEP_STORE or pass --store".into()))?;
    Ok(RecordingStore::new(root))
}

pub fn manifest_path(store: &RecordingStore, dataset: &str) -> PathBuf {
    store.root().join("manifests").join(format!("{dataset}.json"))
}

pub fn dataset_ids(store: &RecordingStore) -> Result<Vec<String>> {
    let dir = store.root().join("manifests");
    let mut ids = Vec::new();
    let entries = fs::read_dir(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(data)?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Manifests of `ids`, or of every dataset when `ids` is empty.
pub fn load_manifests(store: &RecordingStore, ids: &[String]) -> Result<Vec<DatasetManifest>> {
    let ids = if ids.is_empty() { dataset_ids(store)? } else { ids.to_vec() };
    if ids.is_empty() {
        return Err(CliError::Data(format!("no datasets under {}; run `usleep ingest` first", store.root().display())));
    }
    ids.iter().map(|id| DatasetManifest::load(&manifest_path(store, id)).map_err(data)).collect()
}

#[derive(Clone, Debug)]
pub struct Member {
    pub entry: RecordingEntry,
    pub split: Split,
    pub group: usize,
    pub recording: Arc<PreprocessedRecording>,
}

/// Every recording of the selected datasets with its split and age group.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub datasets: Vec<(String, Vec<Member>)>,
}

impl Cohort {
    pub fn load(store: &RecordingStore, manifests: &[DatasetManifest], scheme: AgeGroupScheme) -> Result<Self> {
        let mut datasets = Vec::new();
        for m in manifests {
            let mut members = Vec::new();
            for entry in &m.recordings {
                let split = entry.split.ok_or_else(|| {
                    CliError::Data(format!("dataset `{}` has no split; run `usleep split` first", m.dataset_id))
                })?;
                let group = age_group(entry.age_years, scheme, &entry.id).map_err(data)?;
                let recording = read_recording(&store.root().join(&entry.path)).map_err(data)?;
                members.push(Member { entry: entry.clone(), split, group, recording: Arc::new(recording) });
            }
            datasets.push((m.dataset_id.clone(), members));
        }
        Ok(Cohort { datasets })
    }

    fn select(&self, split: Split, group: Option<usize>) -> impl Iterator<Item = (&str, &Member)> {
        self.datasets.iter().flat_map(move |(id, members)| {
            members
                .iter()
                .filter(move |m| m.split == split && group.is_none_or(|g| m.group == g))
                .map(move |m| (id.as_str(), m))
        })
    }

    /// Sampler datasets of one split; datasets without members are dropped.
    pub fn sampler_datasets(&self, split: Split, group: Option<usize>) -> Vec<SamplerDataset> {
        let mut out: Vec<SamplerDataset> = Vec::new();
        for (id, m) in self.select(split, group) {
            let rec = SamplerRecording::new(m.recording.clone(), m.group);
            match out.last_mut() {
                Some(d) if d.id == id => d.recordings.push(rec),
                _ => out.push(SamplerDataset { id: id.to_string(), recordings: vec![rec] }),
            }
        }
        out
    }

    pub fn eval_set(&self, split: Split, group: Option<usize>) -> Vec<EvalRecording> {
        self.select(split, group).map(|(_, m)| EvalRecording::new(m.recording.clone(), m.group)).collect()
    }

    pub fn samples_per_epoch(&self) -> Option<(String, usize)> {
        self.datasets
            .iter()
            .flat_map(|(_, m)| m.iter())
            .next()
            .map(|m| (m.entry.id.clone(), m.recording.samples_per_epoch()))
    }
}

/// `<base>/<YYYYmmdd-HHMMSS>-<regime>-seed<seed>`, suffixed on collision.
pub fn create_run_dir(base: &Path, regime: &str, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let stem = format!("{stamp}-{regime}-seed{seed}");
    fs::create_dir_all(base).map_err(|e| CliError::Data(format!("{}: {e}", base.display())))?;
    for n in 1.. {
        let dir = if n == 1 { base.join(&stem) } else { base.join(format!("{stem}-{n}")) };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::Data(format!("{}: {e}", dir.display()))),
        }
    }
    unreachable!("unbounded loop")
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
