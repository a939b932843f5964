#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctran_core::data::{generate, save_dataset, SynthSpec};
use ctran_core::model::{checkpoint, CTran, ModelConfig};
use ctran_core::train::{train, MaskSpec, TrainConfig};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub train: PathBuf,
    pub test: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        num_heads: 4,
        grid_h: 2,
        grid_w: 2,
        ..ModelConfig::desk(16)
    }
}

/// Planted-pairs data and a checkpoint trained long enough to couple pairs.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_train: 1500,
        num_test: 60,
        ..SynthSpec::planted(5)
    };
    let splits = generate(&spec).unwrap();
    let train_dir = dir.path().join("data/train");
    let test_dir = dir.path().join("data/test");
    save_dataset(&splits.train, &train_dir).unwrap();
    save_dataset(&splits.test, &test_dir).unwrap();
    let model = CTran::<f32>::new(model_config(), Some(splits.train.label_names.clone()), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&model, &splits.train, &cfg, &MaskSpec::new(16, 5)).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    checkpoint::save(&out.model, &ckpt).unwrap();
    Fixture {
        train: train_dir,
        test: test_dir,
        checkpoint: ckpt,
        dir,
    }
}

pub fn ctran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctran"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn schema() -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/intervene.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Checks the subset of JSON Schema used by the published schema file:
/// `type`, `enum`, `required`, `additionalProperties: false`, `properties`,
/// `items`, numeric bounds, `$ref` into `$defs`.
pub fn conforms(root: &serde_json::Value, schema: &serde_json::Value, value: &serde_json::Value) -> Result<(), String> {
    use serde_json::Value;
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let name = r.trim_start_matches("#/$defs/");
        return conforms(root, &root["$defs"][name], value);
    }
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let ok = types.iter().any(|t| match *t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "null" => value.is_null(),
            "boolean" => value.is_boolean(),
            _ => false,
        });
        if !ok {
            return Err(format!("{value} is not of type {t}"));
        }
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            return Err(format!("{value} not in {options:?}"));
        }
    }
    if let Some(x) = value.as_f64() {
        if let Some(lo) = schema.get("exclusiveMinimum").and_then(Value::as_f64) {
            if x <= lo {
                return Err(format!("{x} <= {lo}"));
            }
        }
        if let Some(hi) = schema.get("exclusiveMaximum").and_then(Value::as_f64) {
            if x >= hi {
                return Err(format!("{x} >= {hi}"));
            }
        }
        if let Some(lo) = schema.get("minimum").and_then(Value::as_f64) {
            if x < lo {
                return Err(format!("{x} < {lo}"));
            }
        }
    }
    if let Value::Object(map) = value {
        let props = schema.get("properties").and_then(Value::as_object);
        for req in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !map.contains_key(req.as_str().unwrap()) {
                return Err(format!("missing `{req}`"));
            }
        }
        for (k, v) in map {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => conforms(root, sub, v).map_err(|e| format!("{k}: {e}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("unexpected property `{k}`"))
                }
                None => {}
            }
        }
    }
    if let (Value::Array(items), Some(sub)) = (value, schema.get("items")) {
        for (i, v) in items.iter().enumerate() {
            conforms(root, sub, v).map_err(|e| format!("[{i}]: {e}"))?;
        }
    }
    Ok(())
}

pub fn validate(def: &str, value: &serde_json::Value) {
    let root = schema();
    let sub = root["$defs"][def].clone();
    assert!(!sub.is_null(), "schema has no definition `{def}`");
    if let Err(e) = conforms(&root, &sub, value) {
        panic!("{def} does not conform: {e}\n{value}");
    }
}
