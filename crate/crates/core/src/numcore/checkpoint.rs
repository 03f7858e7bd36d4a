//! Checkpoints: a JSON manifest plus a flat little-endian f64 blob.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of f64 values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u64,
    pub blob: String,
    pub params: Vec<ManifestEntry>,
    pub aliases: BTreeMap<String, String>,
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Saves every canonical parameter and the alias table. `manifest` is the
/// JSON path; the blob sits next to it with a `.bin` extension.
pub fn save_checkpoint(store: &ParamStore, manifest: &Path) -> Result<()> {
    let blob = blob_path(manifest);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.canonical() {
        params.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
            len: t.len(),
        });
        bytes.extend(t.to_le_bytes());
    }
    let m = Manifest {
        version: CHECKPOINT_VERSION,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params,
        aliases: store.aliases().map(|(a, c)| (a.to_string(), c.to_string())).collect(),
    };
    write_atomic(&blob, &bytes)?;
    let text = serde_json::to_string_pretty(&m)?;
    write_atomic(manifest, text.as_bytes())
}

pub fn load_checkpoint(manifest: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: m.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob = manifest.with_file_name(&m.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let mut store = ParamStore::new();
    for e in &m.params {
        let end = e.offset + e.len * 8;
        if end > bytes.len() {
            return Err(Error::CheckpointMismatch(format!(
                "blob too short for parameter {}",
                e.name
            )));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    for (alias, canonical) in &m.aliases {
        store.alias(alias.clone(), canonical)?;
    }
    Ok(store)
}

/// Copies checkpoint values into `store`, which defines the expected
/// names and shapes. Every mismatch is listed in the error.
pub fn load_into(store: &mut ParamStore, manifest: &Path) -> Result<()> {
    let loaded = load_checkpoint(manifest)?;
    let mut problems = Vec::new();
    for (name, t) in store.canonical() {
        match loaded.get(name) {
            Ok(src) if src.shape() == t.shape() => {}
            Ok(src) => problems.push(format!(
                "{name}: expected {:?}, checkpoint has {:?}",
                t.shape(),
                src.shape()
            )),
            Err(_) => problems.push(format!("{name}: missing from checkpoint")),
        }
    }
    for (name, _) in loaded.canonical() {
        if !store.contains(name) {
            problems.push(format!("{name}: not part of the model"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems.join("; ")));
    }
    let names: Vec<String> = store.canonical().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = loaded.get(&name)?.data().to_vec();
        store.get_mut(&name)?.data_mut().copy_from_slice(&src);
    }
    Ok(())
}
