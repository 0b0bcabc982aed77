//! Wire types, validation and route handlers.

use std::convert::Infallible;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use futures::stream::{self, StreamExt};
use pocketlm_core::prompt::ChatTemplate;
use pocketlm_core::{
    ChatMessage, FinishReason, Generation, ModelError, SamplerParams, StopConditions,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc::UnboundedReceiver;

use crate::engine::{EngineEvent, Finished, Job};
use crate::AppState;

/// Error body `{"error": {"message", "type"}}` with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request_error", message)
    }

    fn out_of_range(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_parameter", message)
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "model is still loading")
    }

    fn from_model(e: ModelError) -> Self {
        match e {
            ModelError::ContextOverflow { .. } => {
                Self::new(StatusCode::CONFLICT, "context_length_exceeded", e.to_string())
            }
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"message": self.message, "type": self.kind}});
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StopField {
    One(String),
    Many(Vec<String>),
}

/// Request body shared by both completion routes. Numeric fields are read
/// loosely so that out-of-range values get a 422 rather than a parse error.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct CompletionRequest {
    pub prompt: Option<String>,
    pub messages: Option<Vec<ChatMessage>>,
    pub max_tokens: Option<i64>,
    pub temperature: Option<f64>,
    pub top_k: Option<i64>,
    pub top_p: Option<f64>,
    pub repeat_penalty: Option<f64>,
    pub repeat_window: Option<i64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub stream: bool,
    pub stop: Option<StopField>,
    pub template: Option<String>,
}

impl CompletionRequest {
    /// Sampler settings, defaults filled in. A missing seed is drawn at random.
    pub fn sampler_params(&self) -> Result<SamplerParams, ApiError> {
        let d = SamplerParams::default();
        let count = |name: &str, v: Option<i64>, default: usize| match v {
            None => Ok(default),
            Some(v) if v >= 0 => Ok(v as usize),
            Some(v) => Err(ApiError::out_of_range(format!("{name} must be >= 0, got {v}"))),
        };
        let params = SamplerParams {
            temperature: self.temperature.map_or(d.temperature, |v| v as f32),
            top_k: count("top_k", self.top_k, d.top_k)?,
            top_p: self.top_p.map_or(d.top_p, |v| v as f32),
            repeat_penalty: self.repeat_penalty.map_or(d.repeat_penalty, |v| v as f32),
            repeat_window: count("repeat_window", self.repeat_window, d.repeat_window)?,
            seed: self.seed.unwrap_or_else(SamplerParams::random_seed),
        };
        params
            .validate()
            .map_err(|e| ApiError::out_of_range(e.to_string()))?;
        Ok(params)
    }

    fn stop_texts(&self) -> Vec<String> {
        match &self.stop {
            None => Vec::new(),
            Some(StopField::One(s)) => vec![s.clone()],
            Some(StopField::Many(v)) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub total_tokens: usize,
}

impl Usage {
    fn new(prompt_tokens: usize, completion_tokens: usize) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
        }
    }
}

/// OpenAI finish reason for an engine finish reason.
pub fn finish_reason_str(r: FinishReason) -> &'static str {
    match r {
        FinishReason::Eos | FinishReason::StopText | FinishReason::Cancelled => "stop",
        FinishReason::Length | FinishReason::ContextFull => "length",
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Route {
    Chat,
    Completion,
}

impl Route {
    fn object(self, chunk: bool) -> &'static str {
        match (self, chunk) {
            (Route::Chat, false) => "chat.completion",
            (Route::Chat, true) => "chat.completion.chunk",
            (Route::Completion, _) => "text_completion",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Route::Chat => "chatcmpl-",
            Route::Completion => "cmpl-",
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

struct Prepared {
    job: Job,
    stream: bool,
}

fn parse(body: &Bytes) -> Result<CompletionRequest, ApiError> {
    if body.is_empty() {
        return Err(ApiError::bad_request("request body is empty"));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON: {e}")))
}

fn prepare(state: &AppState, route: Route, req: CompletionRequest) -> Result<Prepared, ApiError> {
    let engine = state.engine().ok_or_else(ApiError::not_loaded)?;
    let model = engine.model();
    let (text, mut stops) = match (route, &req.prompt, &req.messages) {
        (_, Some(_), Some(_)) => {
            return Err(ApiError::bad_request("give either prompt or messages, not both"))
        }
        (Route::Chat, None, Some(messages)) => {
            let template = match req.template.as_deref() {
                None => state.config().template.clone(),
                Some(name) => {
                    let t: ChatTemplate = name
                        .parse()
                        .map_err(|e: pocketlm_core::prompt::PromptError| ApiError::out_of_range(e.to_string()))?;
                    if t.name() == state.config().template.name() {
                        state.config().template.clone()
                    } else {
                        t
                    }
                }
            };
            let text = template
                .render(messages)
                .map_err(|e| ApiError::bad_request(e.to_string()))?;
            (text, template.turn_marker().map(str::to_string).into_iter().collect())
        }
        (Route::Completion, Some(prompt), None) => (prompt.clone(), Vec::new()),
        (Route::Chat, _, None) => return Err(ApiError::bad_request("messages is required")),
        (Route::Completion, None, _) => {
            return Err(ApiError::bad_request("prompt is required"))
        }
    };
    let params = req.sampler_params()?;
    let max_tokens = match req.max_tokens {
        None => state.config().default_max_tokens,
        Some(n) if n >= 0 => n as usize,
        Some(n) => return Err(ApiError::out_of_range(format!("max_tokens must be >= 0, got {n}"))),
    };
    stops.extend(req.stop_texts());
    let prompt = model.vocab.encode(&text, true);
    if prompt.len() > engine.ctx() {
        return Err(ApiError::from_model(ModelError::ContextOverflow {
            needed: prompt.len(),
            ctx: engine.ctx(),
        }));
    }
    Ok(Prepared {
        job: Job {
            prompt,
            params,
            stops: StopConditions::max_tokens(max_tokens).with_stop_texts(stops),
        },
        stream: req.stream,
    })
}

async fn handle(state: AppState, route: Route, body: Bytes) -> Result<Response, ApiError> {
    let req = parse(&body)?;
    let Prepared { job, stream } = prepare(&state, route, req)?;
    let engine = state.engine().ok_or_else(ApiError::not_loaded)?;
    let events = engine
        .submit(job)
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "server_busy", e.to_string()))?;
    let id = format!("{}{}", route.id_prefix(), uuid::Uuid::new_v4().simple());
    let model_name = engine.model().name.clone();
    if stream {
        Ok(sse_response(events, route, id, model_name))
    } else {
        let finished = collect(events).await?;
        Ok(Json(full_body(route, &id, &model_name, &finished.generation)).into_response())
    }
}

async fn collect(mut events: UnboundedReceiver<EngineEvent>) -> Result<Finished, ApiError> {
    while let Some(e) = events.recv().await {
        match e {
            EngineEvent::Delta(_) => {}
            EngineEvent::Done(f) => return Ok(f),
            EngineEvent::Failed(e) => return Err(ApiError::from_model(e)),
        }
    }
    Err(ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        "internal_error",
        "engine stopped",
    ))
}

/// `completion_tokens` counts sampler draws, so an end-of-sequence token or
/// one cut by a stop string is included.
fn usage_of(g: &Generation) -> Usage {
    Usage::new(g.prompt_tokens, g.sampled)
}

fn full_body(route: Route, id: &str, model: &str, g: &Generation) -> Value {
    let finish = finish_reason_str(g.finish_reason);
    let choice = match route {
        Route::Chat => json!({
            "index": 0,
            "message": {"role": "assistant", "content": g.text},
            "finish_reason": finish,
        }),
        Route::Completion => json!({"index": 0, "text": g.text, "finish_reason": finish}),
    };
    json!({
        "id": id,
        "object": route.object(false),
        "created": unix_now(),
        "model": model,
        "choices": [choice],
        "usage": usage_of(g),
    })
}

fn chunk(route: Route, id: &str, model: &str, created: u64, choice: Value) -> Value {
    json!({
        "id": id,
        "object": route.object(true),
        "created": created,
        "model": model,
        "choices": [choice],
    })
}

fn delta_choice(route: Route, text: &str) -> Value {
    match route {
        Route::Chat => json!({"index": 0, "delta": {"content": text}, "finish_reason": null}),
        Route::Completion => json!({"index": 0, "text": text, "finish_reason": null}),
    }
}

fn frame(v: &Value) -> Bytes {
    Bytes::from(format!("data: {v}\n\n"))
}

/// Streams `data: <chunk>\n\n` frames, one per delta, then a final chunk
/// carrying the finish reason and usage, then `data: [DONE]\n\n`.
fn sse_response(
    events: UnboundedReceiver<EngineEvent>,
    route: Route,
    id: String,
    model: String,
) -> Response {
    let created = unix_now();
    let head = match route {
        Route::Chat => Some(frame(&chunk(
            route,
            &id,
            &model,
            created,
            json!({"index": 0, "delta": {"role": "assistant"}, "finish_reason": null}),
        ))),
        Route::Completion => None,
    };
    let body = stream::unfold(Some(events), move |rx| {
        let (id, model) = (id.clone(), model.clone());
        async move {
            let mut rx = rx?;
            let out = match rx.recv().await {
                Some(EngineEvent::Delta(text)) => {
                    let v = chunk(route, &id, &model, created, delta_choice(route, &text));
                    return Some((vec![frame(&v)], Some(rx)));
                }
                Some(EngineEvent::Done(f)) => {
                    let g = &f.generation;
                    let mut last = delta_choice(route, "");
                    if route == Route::Chat {
                        last["delta"] = json!({});
                    }
                    last["finish_reason"] = json!(finish_reason_str(g.finish_reason));
                    let mut v = chunk(route, &id, &model, created, last);
                    v["usage"] = json!(usage_of(g));
                    vec![frame(&v)]
                }
                Some(EngineEvent::Failed(e)) => {
                    let err = ApiError::from_model(e);
                    vec![frame(&json!({"error": {"message": err.message, "type": err.kind}}))]
                }
                None => vec![],
            };
            let mut frames = out;
            frames.push(Bytes::from_static(b"data: [DONE]\n\n"));
            Some((frames, None))
        }
    })
    .flat_map(|frames| stream::iter(frames.into_iter().map(Ok::<_, Infallible>)));
    let body = stream::iter(head.into_iter().map(Ok::<_, Infallible>)).chain(body);
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(body))
        .unwrap()
}

pub async fn chat_completions(State(state): State<AppState>, body: Bytes) -> Response {
    handle(state, Route::Chat, body)
        .await
        .unwrap_or_else(IntoResponse::into_response)
}

pub async fn completions(State(state): State<AppState>, body: Bytes) -> Response {
    handle(state, Route::Completion, body)
        .await
        .unwrap_or_else(IntoResponse::into_response)
}

pub async fn health(State(state): State<AppState>) -> Response {
    match state.engine() {
        Some(_) => Json(json!({"status": "ok"})).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"status": "loading"})),
        )
            .into_response(),
    }
}

pub async fn models(State(state): State<AppState>) -> Response {
    let Some(engine) = state.engine() else {
        return ApiError::not_loaded().into_response();
    };
    let m = engine.model();
    Json(json!({
        "object": "list",
        "data": [{
            "id": m.name,
            "object": "model",
            "owned_by": "local",
            "params": m.report.n_params,
            "dtypes": m.report.params_by_dtype,
            "bits_per_weight": m.report.bits_per_weight,
            "context_length": engine.ctx(),
        }],
    }))
    .into_response()
}
