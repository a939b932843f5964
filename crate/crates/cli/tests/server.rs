mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use common::{arg, ctran, fixture, validate};
use ctran_cli::commands;
use ctran_cli::server::{router, AppState};
use ctran_cli::PredictArgs;
use ctran_core::model::checkpoint;

fn app(fx: &common::Fixture) -> Router {
    router(Arc::new(AppState::load(&fx.checkpoint, Some(&fx.test)).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, serde_json::Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn info_and_samples_describe_the_model() {
    let fx = fixture();
    let app = app(&fx);
    let (status, info) = call(&app, "GET", "/model/info", "").await;
    assert_eq!(status, StatusCode::OK);
    validate("ModelInfo", &info);
    assert_eq!(info["label_names"].as_array().unwrap().len(), 16);
    assert_eq!(info["config"]["num_labels"], 16);
    assert_eq!(info["checkpoint_sha256"], checkpoint::file_digest(&fx.checkpoint).unwrap());

    let (status, samples) = call(&app, "GET", "/samples", "").await;
    assert_eq!(status, StatusCode::OK);
    validate("Samples", &samples);
    assert_eq!(samples.as_array().unwrap().len(), 60);
    assert_eq!(samples[0]["id"], 1500);
}

#[tokio::test]
async fn empty_states_equal_cli_predict() {
    let fx = fixture();
    let app = app(&fx);
    let (status, served) = call(&app, "POST", "/predict", r#"{"sample_id": 1503, "states": []}"#).await;
    assert_eq!(status, StatusCode::OK);
    validate("InterveneResponse", &served);
    let cli = commands::predict(&PredictArgs {
        checkpoint: fx.checkpoint.clone(),
        dataset: Some(fx.test.clone()),
        sample_id: Some(1503),
        features: None,
        states: vec![],
        request: None,
    })
    .unwrap();
    for (l, want) in served["labels"].as_array().unwrap().iter().zip(&cli.labels) {
        assert_eq!(l["probability"].as_f64().unwrap().to_bits(), want.probability.to_bits());
    }

    let o = ctran(&[
        "predict",
        "--checkpoint",
        arg(&fx.checkpoint),
        "--dataset",
        arg(&fx.test),
        "--sample-id",
        "1503",
    ]);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["labels"], served["labels"]);
}

#[tokio::test]
async fn malformed_requests_report_the_field_path() {
    let fx = fixture();
    let app = app(&fx);
    let (status, body) = call(
        &app,
        "POST",
        "/predict",
        r#"{"sample_id": 1500, "states": [{"label": "label_00", "state": "maybe"}]}"#,
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    validate("ErrorBody", &body);
    assert_eq!(body["path"], "states[0].state");

    let (status, body) = call(&app, "POST", "/predict", r#"{"sample_id": "x"}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["path"], "sample_id");

    let (status, body) = call(&app, "POST", "/predict", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn unknown_labels_list_the_valid_names() {
    let fx = fixture();
    let app = app(&fx);
    let (status, body) = call(
        &app,
        "POST",
        "/predict",
        r#"{"sample_id": 1500, "states": [{"label": "zebra", "state": "positive"}]}"#,
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    validate("ErrorBody", &body);
    assert!(body["error"].as_str().unwrap().contains("zebra"));
    assert_eq!(body["valid_labels"].as_array().unwrap().len(), 16);
    assert_eq!(body["valid_labels"][0], "label_00");

    let (status, _) = call(&app, "POST", "/predict", r#"{"sample_id": 9}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_requests_agree_and_leave_the_checkpoint_untouched() {
    let fx = fixture();
    let before = checkpoint::file_digest(&fx.checkpoint).unwrap();
    let app = app(&fx);
    let body = r#"{"sample_id": 1520, "states": [{"label": "label_04", "state": "positive"}]}"#;
    let (a, b) = tokio::join!(call(&app, "POST", "/predict", body), call(&app, "POST", "/predict", body));
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
    for id in 1500..1510 {
        let req = format!(r#"{{"sample_id": {id}, "states": [{{"label": "label_01", "state": "negative"}}]}}"#);
        assert_eq!(call(&app, "POST", "/predict", &req).await.0, StatusCode::OK);
    }
    assert_eq!(checkpoint::file_digest(&fx.checkpoint).unwrap(), before);
}

#[tokio::test]
async fn positive_driver_raises_its_partner() {
    let fx = fixture();
    let app = app(&fx);
    for id in [1500, 1511, 1527] {
        for pair in 0..8 {
            let req = format!(
                r#"{{"sample_id": {id}, "states": [{{"label": "label_{:02}", "state": "positive"}}]}}"#,
                2 * pair
            );
            let (status, resp) = call(&app, "POST", "/predict", &req).await;
            assert_eq!(status, StatusCode::OK);
            let partner = 2 * pair + 1;
            let now = resp["labels"][partner]["probability"].as_f64().unwrap();
            let base = resp["baseline"][partner].as_f64().unwrap();
            assert!(now > base, "sample {id} pair {pair}: {now} <= {base}");
        }
    }
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(10))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_command_answers_over_tcp() {
    let fx = fixture();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_ctran"))
        .args([
            "serve",
            "--checkpoint",
            arg(&fx.checkpoint),
            "--dataset",
            arg(&fx.test),
            "--port",
            &port.to_string(),
        ])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let mut reply = None;
    for _ in 0..100 {
        if let Some(r) = http_get(port, "/model/info") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server did not answer");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"label_names\""));
}
