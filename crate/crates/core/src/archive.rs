//! Weight archive: a directory holding `manifest.json` and a flat
//! little-endian float32 blob `weights.bin`.
//!
//! ```text
//! manifest.json = { "format": "crn-weights-v1",
//!                   "header": { "kind": ..., "config": ..., "step": ..., "seed": ... },
//!                   "tensors": [ { "name", "shape", "dtype": "f32", "byte_offset" }, ... ] }
//! ```
//! Tensors are stored back to back in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};
use crate::params::ParamStore;

pub const FORMAT: &str = "crn-weights-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    /// Model kind, e.g. `crn`, `fullres`, `encoder_decoder`, `perceiver`.
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub header: ArchiveHeader,
    pub tensors: Vec<TensorRecord>,
}

pub fn save_archive(dir: &Path, header: &ArchiveHeader, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CrnError::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.scalar_count() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for entry in params.entries() {
        tensors.push(TensorRecord {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            dtype: "f32".into(),
            byte_offset: blob.len() as u64,
        });
        for &v in &entry.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        header: header.clone(),
        tensors,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CrnError::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| CrnError::io(&manifest_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| CrnError::io(&blob_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CrnError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CrnError::json(&path, e))?;
    if manifest.format != FORMAT {
        return Err(CrnError::Schema(format!(
            "{}: unsupported archive format {:?}",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Reads an archive, validating dtypes, offsets and blob length.
pub fn load_archive(dir: &Path) -> Result<(ArchiveHeader, ParamStore)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| CrnError::io(&blob_path, e))?;
    let mut params = ParamStore::new();
    let mut expected_offset = 0u64;
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(CrnError::Schema(format!("tensor {} has dtype {:?}, expected f32", t.name, t.dtype)));
        }
        if t.byte_offset != expected_offset {
            return Err(CrnError::Schema(format!(
                "tensor {} starts at byte {}, expected {}",
                t.name, t.byte_offset, expected_offset
            )));
        }
        let n: usize = t.shape.iter().product();
        let start = t.byte_offset as usize;
        let end = start + 4 * n;
        let bytes = blob.get(start..end).ok_or_else(|| {
            CrnError::Schema(format!("tensor {} extends past the end of {}", t.name, BLOB_FILE))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if params.id_of(&t.name).is_some() {
            return Err(CrnError::Schema(format!("duplicate tensor {}", t.name)));
        }
        params.insert(t.name.clone(), t.shape.clone(), data);
        expected_offset = end as u64;
    }
    if expected_offset as usize != blob.len() {
        return Err(CrnError::Schema(format!(
            "{} has {} trailing bytes",
            BLOB_FILE,
            blob.len() - expected_offset as usize
        )));
    }
    Ok((manifest.header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("a.weight", vec![2, 3], vec![0.1, -2.5, 3.75, 1e-8, -0.0, 7.0]);
        store.insert("a.bias", vec![2], vec![f32::MAX as f64, f32::MIN_POSITIVE as f64]);
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let header = ArchiveHeader {
            kind: "crn".into(),
            config: serde_json::json!({"x": 1}),
            step: 7,
            seed: 3,
        };
        let store = sample_store();
        save_archive(dir.path(), &header, &store).unwrap();
        let (h2, s2) = load_archive(dir.path()).unwrap();
        assert_eq!(h2, header);
        for (a, b) in store.entries().iter().zip(s2.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let blob1 = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_archive(dir2.path(), &h2, &s2).unwrap();
        assert_eq!(blob1, fs::read(dir2.path().join(BLOB_FILE)).unwrap());
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let header = ArchiveHeader {
            kind: "crn".into(),
            config: serde_json::Value::Null,
            step: 0,
            seed: 0,
        };
        save_archive(dir.path(), &header, &sample_store()).unwrap();
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        fs::write(dir.path().join(BLOB_FILE), &blob[..blob.len() - 4]).unwrap();
        let err = load_archive(dir.path()).unwrap_err();
        assert!(err.to_string().contains("a.bias"), "{err}");
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        assert!(matches!(load_archive(dir.path()), Err(CrnError::Json { .. })));
    }
}
