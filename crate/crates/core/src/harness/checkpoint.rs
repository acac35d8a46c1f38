//! Tensor archives: a JSON manifest next to a little-endian blob.

use std::fs;
use std::path::{Path, PathBuf};

use edt_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{EdtError, Result};

pub const FORMAT: &str = "edt-tensors/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// `base.json` and `base.bin` for a base path without extension.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn archive_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes `entries` in order; `meta` is stored verbatim in the manifest.
pub fn save_tensors<T: Real>(base: &Path, entries: &[(String, &Tensor<T>)], meta: serde_json::Value) -> Result<Manifest> {
    let (json_path, bin_path) = archive_paths(base);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| EdtError::io(dir, e))?;
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        let offset = blob.len() as u64;
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
        meta,
    };
    fs::write(&bin_path, &blob).map_err(|e| EdtError::io(&bin_path, e))?;
    crate::config::write_json(&json_path, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(base: &Path) -> Result<Manifest> {
    let (json_path, _) = archive_paths(base);
    let m: Manifest = crate::config::read_json(&json_path)?;
    if m.format != FORMAT {
        return Err(EdtError::Manifest(format!("unknown archive format {:?}", m.format)));
    }
    Ok(m)
}

/// Reads every tensor back, checking dtype, extent and blob bounds.
pub fn load_tensors<T: Real>(base: &Path) -> Result<(NamedTensors<T>, Manifest)> {
    let manifest = read_manifest(base)?;
    let (json_path, _) = archive_paths(base);
    let bin_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin_path).map_err(|e| EdtError::io(&bin_path, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != T::DTYPE {
            return Err(EdtError::Manifest(format!(
                "tensor {} stored as {}, requested {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.bytes as usize != numel * T::BYTES {
            return Err(EdtError::Manifest(format!(
                "tensor {} has {} bytes for shape {:?}",
                e.name, e.bytes, e.shape
            )));
        }
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + e.bytes as usize)
            .ok_or_else(|| EdtError::Manifest(format!("tensor {} lies outside the blob", e.name)))?;
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok((out, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use edt_tensor::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let mut rng = Rng::new(3);
        let a = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::<f32>::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap();
        save_tensors(&base, &[("a".into(), &a), ("b".into(), &b)], serde_json::json!({"k": 1})).unwrap();
        let (back, m) = load_tensors::<f32>(&base).unwrap();
        assert_eq!(m.meta["k"], 1);
        assert_eq!(back[0].0, "a");
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(matches!(load_tensors::<f64>(&base), Err(EdtError::Manifest(_))));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let a = Tensor::<f64>::zeros(&[4]);
        save_tensors(&base, &[("a".into(), &a)], serde_json::Value::Null).unwrap();
        fs::write(base.with_extension("bin"), [0u8; 8]).unwrap();
        assert!(matches!(load_tensors::<f64>(&base), Err(EdtError::Manifest(_))));
    }
}
