//! Checkpoints: a JSON manifest next to a little-endian f32 tensor blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::model::{CrateModel, ModelSpec};
use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub model: ModelSpec,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path for a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save<T: Scalar>(model: &CrateModel<T>, seed: u64, path: &Path) -> Result<Manifest> {
    let blob = blob_path(path);
    if blob == path {
        return Err(Error::InvalidArgument(format!(
            "checkpoint manifest {} would collide with its blob",
            path.display()
        )));
    }
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint path {} has no file name", path.display())))?
        .to_string();
    let mut bytes = Vec::with_capacity(model.parameter_count() * 4);
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, m) in model.names().iter().zip(model.params()) {
        let offset = bytes.len();
        for v in m.as_slice() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset,
            bytes: bytes.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        seed,
        model: model.spec().clone(),
        blob: blob_name,
        tensors,
    };
    fs::write(&blob, &bytes)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(manifest)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(CrateModel<T>, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_file)?;
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let [rows, cols] = t.shape;
        if t.bytes != rows * cols * 4 || t.offset + t.bytes > bytes.len() {
            return Err(Error::Format(format!(
                "tensor `{}` spans bytes {}..{} of a {}-byte blob",
                t.name,
                t.offset,
                t.offset + t.bytes,
                bytes.len()
            )));
        }
        let data = bytes[t.offset..t.offset + t.bytes]
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect();
        named.push((t.name.clone(), Matrix::from_vec(rows, cols, data)?));
    }
    let model = CrateModel::from_named(manifest.model.clone(), named)?;
    Ok((model, manifest))
}
