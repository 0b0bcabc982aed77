#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pocketlm_core::synth::TinySpec;
use pocketlm_core::{load_model, Model, ModelContainer};
use pocketlm_server::{router, AppState, ServerConfig};
use serde_json::Value;
use tower::ServiceExt;

pub fn tiny_spec() -> TinySpec {
    TinySpec {
        ctx_max: 512,
        ..TinySpec::default()
    }
}

pub fn tiny_container() -> ModelContainer {
    tiny_spec().build()
}

pub fn tiny_model() -> Arc<Model> {
    Arc::new(load_model(&tiny_container()).unwrap())
}

pub fn loaded(config: ServerConfig) -> (AppState, Router) {
    let state = AppState::new(config);
    state.set_model(tiny_model()).unwrap();
    let app = router(state.clone());
    (state, app)
}

pub fn app() -> Router {
    loaded(ServerConfig::default()).1
}

pub async fn send(app: &Router, method: &str, path: &str, body: Option<&str>) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

pub async fn post_json(app: &Router, path: &str, body: Value) -> (StatusCode, Value) {
    let (status, text) = send(app, "POST", path, Some(&body.to_string())).await;
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

/// Splits an SSE body into its `data:` payloads, checking the framing.
pub fn sse_payloads(body: &str) -> Vec<String> {
    assert!(body.ends_with("data: [DONE]\n\n"), "{body:?}");
    body.split_terminator("\n\n")
        .map(|f| f.strip_prefix("data: ").expect("data frame").to_string())
        .collect()
}

/// Concatenated delta text of a chat or completion stream.
pub fn stream_text(payloads: &[String]) -> String {
    payloads
        .iter()
        .filter(|p| p.as_str() != "[DONE]")
        .map(|p| {
            let v: Value = serde_json::from_str(p).unwrap();
            let c = &v["choices"][0];
            c["delta"]["content"]
                .as_str()
                .or(c["text"].as_str())
                .unwrap_or("")
                .to_string()
        })
        .collect()
}

/// The last chunk before `[DONE]`.
pub fn final_chunk(payloads: &[String]) -> Value {
    serde_json::from_str(&payloads[payloads.len() - 2]).unwrap()
}

pub fn strip_volatile(mut v: Value) -> Value {
    v["id"] = Value::Null;
    v["created"] = Value::Null;
    v
}
