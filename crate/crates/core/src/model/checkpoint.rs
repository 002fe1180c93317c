//! Checkpoints: a text manifest plus one contiguous little-endian blob.
//!
//! ```text
//! <dir>/manifest.txt
//!     format=usleep-checkpoint-1
//!     config.depth=12
//!     ...
//!     tensor encoder.0.conv.weight f32 7,2,9 0 504
//! <dir>/weights.bin
//! ```
//!
//! Tensor lines are `tensor <name> <dtype> <shape> <byte offset> <bytes>`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ArchitectureConfig, BnVariant, ConfigError, UNet};
use crate::tensor::{DType, Real, Tensor};

const FORMAT: &str = "usleep-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("manifest config: {0}")]
    Config(#[from] ConfigError),
    #[error("tensor `{key}`: {reason}")]
    Tensor { key: String, reason: String },
    #[error("checkpoint uses {found} normalization but {expected} was requested; must convert (convert_to_sabn) first")]
    MustConvert { found: BnVariant, expected: BnVariant },
    #[error("checkpoint architecture differs from the requested one: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn encode<T: Real>(values: &[T], dtype: DType, out: &mut Vec<u8>) {
    for &v in values {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

fn decode<T: Real>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect(),
    }
}

/// Writes `model` under `dir`, storing tensors as `dtype`.
pub fn save_checkpoint<T: Real>(model: &UNet<T>, dir: &Path, dtype: DType) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = format!("format={FORMAT}\n");
    for (k, v) in model.config().to_pairs() {
        manifest.push_str(&format!("config.{k}={v}\n"));
    }
    let mut blob = Vec::new();
    for (name, t, _) in model.named_tensors() {
        let offset = blob.len();
        encode(t.data(), dtype, &mut blob);
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor {name} {} {} {offset} {}\n",
            dtype.name(),
            shape.join(","),
            blob.len() - offset
        ));
    }
    let path = dir.join(BLOB_FILE);
    fs::write(&path, blob).map_err(io_err(&path))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(io_err(&path))
}

struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

fn parse_manifest(text: &str) -> Result<(ArchitectureConfig, BTreeMap<String, Entry>), CheckpointError> {
    let mut config = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut format_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |reason: String| CheckpointError::Manifest { line, reason };
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(rest) = s.strip_prefix("tensor ") {
            let cols: Vec<&str> = rest.split_whitespace().collect();
            if cols.len() != 5 {
                return Err(err(format!("expected 5 fields after `tensor`, found {}", cols.len())));
            }
            let dtype = DType::parse(cols[1]).ok_or_else(|| err(format!("unknown dtype {:?}", cols[1])))?;
            let shape = cols[2]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| err(format!("bad shape {:?}", cols[2])))?;
            let offset = cols[3].parse().map_err(|_| err(format!("bad offset {:?}", cols[3])))?;
            let nbytes = cols[4].parse().map_err(|_| err(format!("bad length {:?}", cols[4])))?;
            if tensors.insert(cols[0].to_string(), Entry { dtype, shape, offset, nbytes }).is_some() {
                return Err(err(format!("duplicate tensor `{}`", cols[0])));
            }
        } else if let Some((k, v)) = s.split_once('=') {
            match k.strip_prefix("config.") {
                Some(key) => {
                    config.insert(key.to_string(), v.to_string());
                }
                None if k == "format" => {
                    if v != FORMAT {
                        return Err(err(format!("unsupported format {v:?}")));
                    }
                    format_seen = true;
                }
                None => return Err(err(format!("unknown key `{k}`"))),
            }
        } else {
            return Err(err("expected key=value or a tensor line".into()));
        }
    }
    if !format_seen {
        return Err(CheckpointError::Manifest { line: 0, reason: "missing format line".into() });
    }
    Ok((ArchitectureConfig::from_map(&config)?, tensors))
}

/// Loads a checkpoint with whatever architecture it records.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<UNet<T>, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let (config, mut entries) = parse_manifest(&text)?;
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path).map_err(io_err(&path))?;
    let mut model = UNet::<T>::skeleton(&config);
    for (name, t, _) in model.named_tensors_mut() {
        let err = |reason: String| CheckpointError::Tensor { key: name.clone(), reason };
        let e = entries.remove(&name).ok_or_else(|| err("missing from manifest".into()))?;
        if e.shape != t.shape() {
            return Err(err(format!("shape {:?} in manifest, model expects {:?}", e.shape, t.shape())));
        }
        if e.nbytes != t.len() * e.dtype.size() {
            return Err(err(format!("{} bytes recorded for {} {} values", e.nbytes, t.len(), e.dtype.name())));
        }
        let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(err(format!("blob truncated: needs bytes up to {}, has {}", e.offset + e.nbytes, blob.len())));
        };
        *t = Tensor::new(e.shape, decode(&blob[e.offset..end], e.dtype)).map_err(|x| err(x.to_string()))?;
    }
    if let Some(extra) = entries.keys().next() {
        return Err(CheckpointError::Tensor { key: extra.clone(), reason: "not part of this architecture".into() });
    }
    Ok(model)
}

/// Loads a checkpoint and checks it matches `expected`. A vanilla
/// checkpoint requested as a conditional model is refused: it has to go
/// through [`UNet::convert_to_sabn`].
pub fn load_checkpoint_as<T: Real>(dir: &Path, expected: &ArchitectureConfig) -> Result<UNet<T>, CheckpointError> {
    let model = load_checkpoint::<T>(dir)?;
    let found = model.config();
    if found.bn_variant != expected.bn_variant {
        return Err(CheckpointError::MustConvert { found: found.bn_variant, expected: expected.bn_variant });
    }
    if found != expected {
        let diffs: Vec<String> = found
            .to_pairs()
            .into_iter()
            .zip(expected.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} vs {}", a.0, a.1, b.1))
            .collect();
        return Err(CheckpointError::Mismatch(diffs.join(", ")));
    }
    Ok(model)
}
