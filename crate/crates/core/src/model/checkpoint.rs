//! Single-file checkpoints.
//!
//! ```text
//! u64 LE   manifest length N
//! N bytes  JSON manifest (format_version, dtype, config, label_names, group_names, tensors)
//! blobs    one tensor blob per parameter, in manifest `tensors` order
//! ```

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CTran, CTranParams, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::blob::{read_blob, write_blob};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: Dtype,
    pub config: ModelConfig,
    pub label_names: Vec<String>,
    pub group_names: Vec<String>,
    pub tensors: Vec<String>,
}

pub fn to_bytes<T: Scalar>(model: &CTran<T>) -> Vec<u8> {
    let named = model.params.named();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        config: model.config.clone(),
        label_names: model.label_names.clone(),
        group_names: model
            .config
            .label_partition
            .as_ref()
            .map(|p| p.groups.iter().map(|g| g.name.clone()).collect())
            .unwrap_or_default(),
        tensors: named.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(json.len() + 8 + model.params.num_scalars() * T::DTYPE.size_of());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in named {
        write_blob(&mut out, &name, t).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn save<T: Scalar>(model: &CTran<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

fn read_manifest<R: Read>(r: &mut R, path: &Path) -> Result<CheckpointManifest> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::format(path, "missing manifest length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 26 {
        return Err(Error::format(path, format!("manifest length {len} too large")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&buf).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(manifest)
}

/// Reads only the manifest, e.g. to pick the element width before loading.
pub fn peek(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(&mut BufReader::new(f), path)
}

/// Loads a checkpoint, converting stored tensors to `T` if the widths differ.
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<CTran<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let manifest = read_manifest(&mut r, path)?;
    manifest.config.validate()?;
    if manifest.label_names.len() != manifest.config.num_labels {
        return Err(Error::format(path, "label name count does not match config"));
    }
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::with_capacity(manifest.tensors.len());
    for want in &manifest.tensors {
        let (name, t) = read_blob::<T, _>(&mut r)
            .map_err(|e| Error::format(path, e.to_string()))?
            .ok_or_else(|| Error::format(path, format!("missing tensor `{want}`")))?;
        if &name != want {
            return Err(Error::format(path, format!("expected tensor `{want}`, found `{name}`")));
        }
        tensors.push((name, t));
    }
    let params = CTranParams::from_named(&manifest.config, tensors)?;
    Ok(CTran {
        config: manifest.config,
        label_names: manifest.label_names,
        params,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
