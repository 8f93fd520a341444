//! Parameter checkpoints: `<stem>.json` lists every entry with its shape and
//! offset into `<stem>.bin`, a little-endian f64 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cwt::ensure_dir;
use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub optimizer_step: u64,
    pub entries: Vec<CheckpointEntry>,
    pub data_file: String,
    /// Free-form metadata such as the model configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

const FORMAT: &str = "red-checkpoint-1";

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_checkpoint<T: Real>(
    stem: &Path,
    store: &ParamStore<T>,
    optimizer_step: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    ensure_dir(&json_path)?;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for p in store.iter() {
        entries.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        offset += p.value.len();
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        optimizer_step,
        entries,
        data_file: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        extra,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))
}

pub fn read_checkpoint_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let (json_path, _) = checkpoint_paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Load a checkpoint as a fresh store, in saved order.
pub fn load_checkpoint<T: Real>(stem: &Path) -> Result<(ParamStore<T>, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(stem)?;
    let bin_path = stem.with_file_name(&manifest.data_file);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let data = vals.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::Checkpoint(format!("entry {} runs past the end of {}", e.name, bin_path.display()))
        })?;
        store.add(
            e.name.clone(),
            Tensor::new(&e.shape, data.iter().map(|&v| T::lit(v)).collect()),
            e.trainable,
        );
    }
    Ok((store, manifest))
}

/// Copy values from `src` into `dst` by name; shapes must agree and every
/// entry of `dst` must be present.
pub fn assign_by_name<T: Real>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<()> {
    for p in dst.iter_mut() {
        let id = src
            .find(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {}", p.name)))?;
        let s = src.value(id);
        if s.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "entry {} has shape {:?}, expected {:?}",
                p.name,
                s.shape(),
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(s.data());
    }
    Ok(())
}
