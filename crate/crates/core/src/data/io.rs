//! Dataset directory layout.
//!
//! ```text
//! labels.json     {"format_version", "label_names", "partition", "multi_class", "input_kind"}
//! manifest.jsonl  one {"id", "targets", "tags"} object per sample
//! features.bin    one tensor blob named "sample/{id}" per sample, in manifest order
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, InputKind, Sample};
use crate::error::{Error, Result};
use crate::model::{LabelPartition, ModelConfig};
use crate::tensor::blob::{read_blob, write_blob};

pub const DATASET_VERSION: u32 = 1;
pub const LABELS_FILE: &str = "labels.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    format_version: u32,
    label_names: Vec<String>,
    #[serde(default)]
    partition: Option<LabelPartition>,
    #[serde(default)]
    multi_class: bool,
    input_kind: InputKind,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: u64,
    targets: Vec<u8>,
    #[serde(default)]
    tags: Vec<String>,
}

fn blob_name(id: u64) -> String {
    format!("sample/{id}")
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = LabelsFile {
        format_version: DATASET_VERSION,
        label_names: ds.label_names.clone(),
        partition: ds.partition.clone(),
        multi_class: ds.multi_class,
        input_kind: ds.input_kind,
    };
    let path = dir.join(LABELS_FILE);
    let json = serde_json::to_vec_pretty(&labels)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let mpath = dir.join(MANIFEST_FILE);
    let fpath = dir.join(FEATURES_FILE);
    let mut manifest = BufWriter::new(fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?);
    let mut features = BufWriter::new(fs::File::create(&fpath).map_err(|e| Error::io(&fpath, e))?);
    for s in &ds.samples {
        let line = ManifestLine {
            id: s.id,
            targets: s.targets.clone(),
            tags: s.tags.clone(),
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n").map_err(|e| Error::io(&mpath, e))?;
        write_blob(&mut features, &blob_name(s.id), &s.input).map_err(|e| Error::io(&fpath, e))?;
    }
    manifest.flush().map_err(|e| Error::io(&mpath, e))?;
    features.flush().map_err(|e| Error::io(&fpath, e))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let lpath = dir.join(LABELS_FILE);
    let bytes = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let labels: LabelsFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&lpath, e.to_string()))?;
    if labels.format_version != DATASET_VERSION {
        return Err(Error::Version {
            found: labels.format_version,
            expected: DATASET_VERSION,
        });
    }

    let mpath = dir.join(MANIFEST_FILE);
    let fpath = dir.join(FEATURES_FILE);
    let manifest = BufReader::new(fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?);
    let mut features = BufReader::new(fs::File::open(&fpath).map_err(|e| Error::io(&fpath, e))?);
    let mut samples = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&mpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(&mpath, format!("line {}: {e}", lineno + 1)))?;
        let want = blob_name(entry.id);
        let (name, input) = read_blob::<f32, _>(&mut features)
            .map_err(|e| Error::format(&fpath, format!("{want}: {e}")))?
            .ok_or_else(|| Error::format(&fpath, format!("missing blob `{want}`")))?;
        if name != want {
            return Err(Error::format(&fpath, format!("expected blob `{want}`, found `{name}`")));
        }
        samples.push(Sample {
            id: entry.id,
            input,
            targets: entry.targets,
            tags: entry.tags,
        });
    }
    if read_blob::<f32, _>(&mut features)
        .map_err(|e| Error::format(&fpath, e.to_string()))?
        .is_some()
    {
        return Err(Error::format(&fpath, "more blobs than manifest entries"));
    }
    let ds = Dataset {
        label_names: labels.label_names,
        partition: labels.partition,
        multi_class: labels.multi_class,
        input_kind: labels.input_kind,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads a dataset and checks it against the model that will consume it.
pub fn load_dataset_for(dir: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Dataset> {
    let ds = load_dataset(dir)?;
    ds.check_compatible(cfg)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};

    fn hundred() -> Dataset {
        let spec = SynthSpec {
            num_train: 100,
            num_test: 0,
            ..SynthSpec::planted(5)
        };
        generate(&spec).unwrap().train
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = hundred();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert!(a.input.bitwise_eq(&b.input));
        }
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(text.lines().count(), ds.len());
    }

    #[test]
    fn truncated_features_are_reported() {
        let ds = hundred();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let f = dir.path().join(FEATURES_FILE);
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 7]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let ds = hundred();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join(LABELS_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn label_count_mismatch_is_a_shape_error() {
        let ds = hundred();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mut cfg = ModelConfig::desk(12);
        cfg.embed_dim = 32;
        cfg.grid_h = 2;
        cfg.grid_w = 2;
        let err = load_dataset_for(dir.path(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn missing_directory_names_the_path() {
        let err = load_dataset("/nonexistent/ds").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ds"), "{err}");
    }
}
