//! Label-embedding export for offline projection.
//!
//! `path` receives a single tensor blob named `label_embeddings` of shape
//! `[ℓ×d]`; `path` with `.labels.txt` appended receives one label name per line,
//! row `i` of the matrix belonging to line `i`.

use std::fs;
use std::path::{Path, PathBuf};

use super::CTran;
use crate::error::{Error, Result};
use crate::tensor::blob::{read_blob, write_blob};
use crate::tensor::{Scalar, Tensor};

pub fn names_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.txt");
    PathBuf::from(s)
}

/// Returns the path of the label-name manifest written next to `path`.
pub fn export_label_embeddings<T: Scalar>(model: &CTran<T>, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_blob(&mut bytes, "label_embeddings", &model.params.label_embeddings).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let names = names_path(path);
    let mut text = model.label_names.join("\n");
    text.push('\n');
    fs::write(&names, text).map_err(|e| Error::io(&names, e))?;
    Ok(names)
}

pub fn read_label_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<String>, Tensor<T>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, table) = read_blob::<T, _>(&mut bytes.as_slice())
        .map_err(|e| Error::format(path, e.to_string()))?
        .ok_or_else(|| Error::format(path, "empty embedding file"))?;
    let npath = names_path(path);
    let names: Vec<String> = fs::read_to_string(&npath)
        .map_err(|e| Error::io(&npath, e))?
        .lines()
        .map(str::to_string)
        .collect();
    if table.rank() != 2 || table.shape()[0] != names.len() {
        return Err(Error::format(
            &npath,
            format!("{} names for embedding table {:?}", names.len(), table.shape()),
        ));
    }
    Ok((names, table))
}
