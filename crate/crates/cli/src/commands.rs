use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ctran_core::data::{generate, load_dataset, load_dataset_for, save_dataset, Dataset, SynthSpec};
use ctran_core::eval::{csv_string, evaluate, write_csv_file, EvalProtocol, EvalReport, ProtocolMode};
use ctran_core::intervene::{AnyModel, FeatureGrid, InterveneRequest, InterveneResponse, Intervener, LabelStateEntry};
use ctran_core::model::{export_label_embeddings, CTran, LabelState};
use ctran_core::tensor::{Dtype, Scalar};
use ctran_core::train::{save_run, train as fit};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::server::{self, AppState};
use crate::{DtypeArg, EvalArgs, ExportArgs, GenerateArgs, PredictArgs, ServeArgs, TrainArgs};

pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        reason: format!("cannot read: {e}"),
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        reason: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(ctran_core::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| ctran_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn generate_data(a: &GenerateArgs) -> Result<(), CliError> {
    let mut spec = match &a.config {
        Some(p) => read_json::<SynthSpec>(p)?,
        None => SynthSpec::planted(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.num_train {
        spec.num_train = n;
    }
    if let Some(n) = a.num_test {
        spec.num_test = n;
    }
    let splits = generate(&spec)?;
    save_dataset(&splits.train, a.out.join("train"))?;
    save_dataset(&splits.test, a.out.join("test"))?;
    write_json(&a.out.join("synth.json"), &spec)?;
    log::info!(
        "wrote {} train and {} test samples to {}",
        splits.train.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

pub fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(&Overrides {
        dataset: a.dataset.clone(),
        test_dataset: a.test_dataset.clone(),
        output_dir: a.output_dir.clone(),
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        lmt: a.lmt,
        dtype: a.dtype.map(|d| match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }),
    });
    Ok(cfg)
}

fn sweep_protocols(cfg: &RunConfig) -> Vec<EvalProtocol> {
    cfg.eval
        .epsilons
        .iter()
        .map(|&e| EvalProtocol {
            threshold: cfg.eval.threshold,
            top_k: cfg.eval.top_k,
            ..EvalProtocol::partial(e, cfg.eval.seed)
        })
        .collect()
}

fn train_as<T: Scalar>(cfg: &RunConfig, train_ds: &Dataset, test_ds: Option<&Dataset>) -> Result<(), CliError> {
    let model = CTran::<T>::new(cfg.model.clone(), Some(train_ds.label_names.clone()), cfg.init_seed)?;
    let outcome = fit(&model, train_ds, &cfg.train, &cfg.mask_spec())?;
    save_run(&cfg.output_dir, cfg, &outcome)?;
    if let Some(test) = test_ds {
        let reports = sweep_protocols(cfg)
            .iter()
            .map(|p| evaluate(&outcome.model, test, p))
            .collect::<Result<Vec<_>, _>>()?;
        write_reports(&cfg.output_dir, &reports)?;
    }
    Ok(())
}

/// Returns the run directory.
pub fn train(a: &TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = resolve_run_config(a)?;
    let train_ds = load_dataset(&cfg.dataset)?;
    if cfg.model.label_partition.is_none() {
        cfg.model.label_partition = train_ds.partition.clone();
    }
    cfg.validate()?;
    train_ds.check_compatible(&cfg.model)?;
    let test_ds = cfg
        .test_dataset
        .as_ref()
        .map(|p| load_dataset_for(p, &cfg.model))
        .transpose()?;
    match cfg.train.dtype {
        Dtype::F32 => train_as::<f32>(&cfg, &train_ds, test_ds.as_ref())?,
        Dtype::F64 => train_as::<f64>(&cfg, &train_ds, test_ds.as_ref())?,
    }
    log::info!("run written to {}", cfg.output_dir.display());
    Ok(cfg.output_dir)
}

fn write_reports(dir: &Path, reports: &[EvalReport]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| ctran_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    write_csv_file(dir.join(EVAL_CSV), reports)?;
    write_json(&dir.join(EVAL_JSON), &reports)
}

pub fn eval_protocols(a: &EvalArgs) -> Result<Vec<EvalProtocol>, CliError> {
    let with = |mode| EvalProtocol {
        threshold: a.threshold,
        top_k: a.top_k,
        ..EvalProtocol::new(mode, a.seed)
    };
    if !a.known_groups.is_empty() {
        return Ok(vec![with(ProtocolMode::Extra {
            known_groups: a.known_groups.clone(),
        })]);
    }
    if a.epsilon.is_empty() {
        return Ok(vec![with(ProtocolMode::Regular)]);
    }
    a.epsilon
        .iter()
        .map(|&pct| {
            if (0.0..100.0).contains(&pct) {
                Ok(with(ProtocolMode::Partial { epsilon: pct / 100.0 }))
            } else {
                Err(CliError::Usage(format!("--epsilon {pct} outside [0, 100)")))
            }
        })
        .collect()
}

/// Returns the CSV text.
pub fn eval(a: &EvalArgs) -> Result<String, CliError> {
    let protocols = eval_protocols(a)?;
    let model = AnyModel::load(&a.checkpoint)?;
    let ds = load_dataset_for(&a.dataset, model.config())?;
    for p in &protocols {
        p.validate(ds.partition.as_ref())?;
    }
    let reports = protocols
        .iter()
        .map(|p| match &model {
            AnyModel::F32(m) => evaluate(m, &ds, p),
            AnyModel::F64(m) => evaluate(m, &ds, p),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = &a.output_dir {
        write_reports(dir, &reports)?;
    }
    Ok(csv_string(&reports)?)
}

fn parse_state(flag: &str) -> Result<LabelStateEntry, CliError> {
    let (label, state) = flag
        .rsplit_once('=')
        .ok_or_else(|| CliError::Usage(format!("--state `{flag}` is not NAME=STATE")))?;
    let state: LabelState = state.parse().map_err(|e: ctran_core::Error| CliError::Usage(e.to_string()))?;
    Ok(LabelStateEntry {
        label: label.to_string(),
        state,
    })
}

pub fn predict(a: &PredictArgs) -> Result<InterveneResponse, CliError> {
    let model = AnyModel::load(&a.checkpoint)?;
    let ds = a
        .dataset
        .as_ref()
        .map(|p| load_dataset_for(p, model.config()))
        .transpose()?;
    let req = match &a.request {
        Some(p) => read_json::<InterveneRequest>(p)?,
        None => InterveneRequest {
            sample_id: a.sample_id,
            features: a.features.as_deref().map(read_json::<FeatureGrid>).transpose()?,
            states: a.states.iter().map(|s| parse_state(s)).collect::<Result<_, _>>()?,
        },
    };
    Ok(Intervener::new(model, ds)?.run(&req)?)
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let state = Arc::new(AppState::load(&a.checkpoint, a.dataset.as_ref())?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::Server)?
        .block_on(server::serve(state, addr))
}

pub fn export(a: &ExportArgs) -> Result<(), CliError> {
    match AnyModel::load(&a.checkpoint)? {
        AnyModel::F32(m) => export_label_embeddings(&m, &a.out)?,
        AnyModel::F64(m) => export_label_embeddings(&m, &a.out)?,
    };
    Ok(())
}
