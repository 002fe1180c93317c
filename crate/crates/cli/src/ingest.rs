//! `synth`, `ingest` and `split`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usleep::cohort::{split, DatasetManifest, RecordingEntry, Split};
use usleep::preprocess::preprocess;
use usleep::psg::{
    build_derivations, parse_edf, parse_hypnogram, write_edf, DerivationConfig, DerivationMode, EdfFile, Modality,
    SubjectMeta,
};
use usleep::store::RecordingStore;
use usleep::synth::{synth_recording, SynthConfig};

use crate::data::{load_manifests, manifest_path, read, write};
use crate::error::{data, CliError, Result};

pub struct SynthArgs {
    pub out: PathBuf,
    pub dataset: String,
    pub recordings: usize,
    pub epochs: usize,
    pub shift: f64,
    pub age_range: (f64, f64),
    pub flat: usize,
    pub seed: u64,
}

const SUBJECTS_HEADER: &str = "file,subject_id,family_id,age_years,sex";

/// Writes `<id>.edf`, `<id>.hyp.txt` and a `subjects.csv` under `out`.
/// The first `flat` recordings have C3 shorted to M2, so C3-M2 is flat.
pub fn synth(args: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut subjects = format!("{SUBJECTS_HEADER}\n");
    for i in 0..args.recordings {
        let id = format!("{}{:03}", args.dataset, i);
        let age = (rng.random_range(args.age_range.0..=args.age_range.1) * 10.0).floor() / 10.0;
        let cfg = SynthConfig { n_epochs: args.epochs, shift: args.shift, age_years: Some(age), ..Default::default() };
        let mut rec = synth_recording(&id, &args.dataset, &cfg, rng.random());
        if i < args.flat {
            let m2 = rec.channel("M2").map(|c| c.samples.clone());
            if let (Some(c), Some(m2)) = (rec.channels.iter_mut().find(|c| c.label == "C3"), m2) {
                c.samples = m2;
            }
        }
        let edf = EdfFile::from_physical(&rec.channels, 1.0, &id);
        write(&args.out.join(format!("{id}.edf")), write_edf(&edf))?;
        write(&args.out.join(format!("{id}.hyp.txt")), rec.hypnogram.to_text())?;
        let sex = if rng.random::<bool>() { "F" } else { "M" };
        subjects.push_str(&format!("{id},subj-{id},,{age},{sex}\n"));
    }
    write(&args.out.join("subjects.csv"), subjects)?;
    println!("wrote {} recordings to {}", args.recordings, args.out.display());
    Ok(())
}

fn parse_subjects(text: &str) -> Result<BTreeMap<String, SubjectMeta>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(CliError::Data(format!("subjects line {}: expected {SUBJECTS_HEADER}", i + 1)));
        }
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        let age = match cols[3] {
            "" => None,
            a => Some(a.parse::<f64>().map_err(|_| CliError::Data(format!("subjects line {}: bad age {a:?}", i + 1)))?),
        };
        let meta = SubjectMeta { subject_id: cols[1].to_string(), family_id: opt(cols[2]), age_years: age, sex: opt(cols[4]) };
        out.insert(cols[0].to_string(), meta);
    }
    Ok(out)
}

pub struct IngestArgs {
    pub edf_dir: PathBuf,
    pub hyp_dir: Option<PathBuf>,
    pub dataset: String,
    pub mode: DerivationMode,
    pub subjects: Option<PathBuf>,
    pub seed: u64,
}

fn find_hypnogram(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.hyp.txt"), format!("{stem}.txt")].into_iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Parses, derives, preprocesses and stores every EDF of `edf_dir`,
/// printing one eligibility line per file. Fails only if nothing was stored.
pub fn ingest(store: &RecordingStore, args: &IngestArgs) -> Result<()> {
    let hyp_dir = args.hyp_dir.clone().unwrap_or_else(|| args.edf_dir.clone());
    let subjects_file = args.subjects.clone().or_else(|| Some(args.edf_dir.join("subjects.csv")).filter(|p| p.is_file()));
    let subjects = match &subjects_file {
        Some(p) => parse_subjects(&read(p)?)?,
        None => BTreeMap::new(),
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&args.edf_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.edf_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("edf")))
        .collect();
    files.sort();

    let mut manifest = DatasetManifest::new(&args.dataset);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let derivations = DerivationConfig::default();
    for path in &files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let skip = |reason: String| println!("{stem}\tskipped\t{reason}");
        let edf = match fs::read(path).map_err(|e| e.to_string()).and_then(|b| parse_edf(&b).map_err(|e| e.to_string())) {
            Ok(e) => e,
            Err(e) => {
                skip(format!("unreadable EDF: {e}"));
                continue;
            }
        };
        let Some(hyp_path) = find_hypnogram(&hyp_dir, &stem) else {
            skip("no hypnogram".into());
            continue;
        };
        let hyp = match fs::read_to_string(&hyp_path).map_err(|e| e.to_string()).and_then(|t| parse_hypnogram(&t).map_err(|e| e.to_string())) {
            Ok(h) => h,
            Err(e) => {
                skip(format!("unreadable hypnogram: {e}"));
                continue;
            }
        };
        let id = format!("{}.{stem}", args.dataset);
        let subject = subjects.get(&stem).cloned().unwrap_or_else(|| SubjectMeta::new(&stem));
        let rec = edf.to_recording(&id, &args.dataset, subject.clone()).with_hypnogram(hyp);
        let prepared = build_derivations(&rec, args.mode, &derivations, &mut rng)
            .map_err(|e| e.to_string())
            .and_then(|d| preprocess(&rec, &d).map_err(|e| e.to_string()));
        let prepared = match prepared {
            Ok(p) => p,
            Err(e) => {
                skip(e);
                continue;
            }
        };
        let (eeg, eog) = (prepared.usable(Modality::Eeg).len(), prepared.usable(Modality::Eog).len());
        if eeg == 0 || eog == 0 {
            skip(format!("no usable {} channel", if eeg == 0 { "EEG" } else { "EOG" }));
            continue;
        }
        let dir = store.write(&prepared).map_err(data)?;
        println!("{stem}\tstored\t{eeg} EEG x {eog} EOG\t{} epochs", prepared.n_epochs());
        for c in prepared.channels.iter().filter(|c| c.unusable.is_some()) {
            println!("{stem}\texcluded\t{}\t{}", c.derivation.label(), c.unusable.as_deref().unwrap_or_default());
        }
        manifest.recordings.push(RecordingEntry {
            id,
            path: dir.strip_prefix(store.root()).unwrap_or(&dir).to_string_lossy().into_owned(),
            subject_id: subject.subject_id,
            family_id: subject.family_id,
            age_years: subject.age_years,
            sex: subject.sex,
            split: None,
        });
    }
    if manifest.recordings.is_empty() {
        return Err(CliError::Data(format!("no recording of {} could be ingested", args.edf_dir.display())));
    }
    let path = manifest_path(store, &args.dataset);
    fs::create_dir_all(path.parent().expect("manifest dir")).map_err(data)?;
    manifest.save(&path).map_err(data)?;
    println!("dataset {}: {} of {} recordings stored", args.dataset, manifest.recordings.len(), files.len());
    Ok(())
}

/// Assigns train/val/test by subject (or family) for each dataset.
pub fn split_datasets(store: &RecordingStore, datasets: &[String], seed: u64) -> Result<()> {
    for m in load_manifests(store, datasets)? {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = split(&m, &mut rng).map_err(data)?;
        out.split_seed = Some(seed);
        out.save(&manifest_path(store, &m.dataset_id)).map_err(data)?;
        let n = |s: Split| out.in_split(s).count();
        println!(
            "{}\ttrain {}\tval {}\ttest {}",
            m.dataset_id,
            n(Split::Train),
            n(Split::Val),
            n(Split::Test)
        );
    }
    Ok(())
}
