//! JSON-over-HTTP intervention service.
//!
//! - `GET /model/info`: label names, groups, config
//! - `GET /samples`: ids and targets of the loaded dataset
//! - `POST /predict`: `InterveneRequest` in, `InterveneResponse` out

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use ctran_core::intervene::{InterveneRequest, Intervener, RequestError};
use ctran_core::model::{checkpoint, ModelConfig};
use ctran_core::tensor::Dtype;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub name: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub label_names: Vec<String>,
    pub num_target: usize,
    pub groups: Vec<GroupInfo>,
    pub config: ModelConfig,
    pub dtype: Dtype,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: u64,
    pub targets: Vec<u8>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_labels: Option<Vec<String>>,
}

pub struct AppState {
    pub intervener: Intervener,
    pub info: ModelInfo,
}

impl AppState {
    pub fn new(intervener: Intervener, checkpoint_sha256: String) -> Self {
        let model = intervener.model();
        let config = model.config().clone();
        let names = model.label_names().to_vec();
        let groups = config
            .label_partition
            .as_ref()
            .map(|p| {
                p.groups
                    .iter()
                    .map(|g| GroupInfo {
                        name: g.name.clone(),
                        labels: g.labels.iter().map(|&i| names[i].clone()).collect(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let info = ModelInfo {
            num_target: config.num_target(),
            label_names: names,
            groups,
            dtype: model.dtype(),
            config,
            checkpoint_sha256,
        };
        AppState { intervener, info }
    }

    /// Loads the checkpoint once; it is never written afterwards.
    pub fn load(checkpoint: &PathBuf, dataset: Option<&PathBuf>) -> Result<Self, CliError> {
        let digest = checkpoint::file_digest(checkpoint)?;
        let model = ctran_core::intervene::AnyModel::load(checkpoint)?;
        let ds = dataset
            .map(|d| ctran_core::data::load_dataset_for(d, model.config()))
            .transpose()?;
        Ok(AppState::new(Intervener::new(model, ds)?, digest))
    }
}

fn bad_request(body: ErrorBody) -> Response {
    (StatusCode::BAD_REQUEST, Json(body)).into_response()
}

async fn model_info(State(app): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(app.info.clone())
}

async fn samples(State(app): State<Arc<AppState>>) -> Json<Vec<SampleInfo>> {
    let list = app
        .intervener
        .dataset()
        .map(|ds| {
            ds.samples
                .iter()
                .map(|s| SampleInfo {
                    id: s.id,
                    targets: s.targets.clone(),
                    tags: s.tags.clone(),
                })
                .collect()
        })
        .unwrap_or_default();
    Json(list)
}

async fn predict(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let req: InterveneRequest = match serde_path_to_error::deserialize(de) {
        Ok(r) => r,
        Err(e) => {
            let path = e.path().to_string();
            return bad_request(ErrorBody {
                error: e.inner().to_string(),
                path: Some(path),
                valid_labels: None,
            });
        }
    };
    let result = tokio::task::spawn_blocking(move || app.intervener.run(&req)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) if e.is_client_error() => {
            let valid_labels = match &e {
                RequestError::UnknownLabel { valid, .. } => Some(valid.clone()),
                _ => None,
            };
            bad_request(ErrorBody {
                error: e.to_string(),
                path: None,
                valid_labels,
            })
        }
        Ok(Err(e)) => {
            log::error!("predict failed: {e}");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(ErrorBody {
                    error: e.to_string(),
                    path: None,
                    valid_labels: None,
                }),
            )
                .into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/model/info", get(model_info))
        .route("/samples", get(samples))
        .route("/predict", post(predict))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(CliError::Server)?;
    log::info!("listening on http://{}", listener.local_addr().map_err(CliError::Server)?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(CliError::Server)
}
