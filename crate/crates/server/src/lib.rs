//! OpenAI-compatible REST server.
//!
//! Routes:
//!
//! - `POST /v1/chat/completions` renders `messages` with the chat template
//! - `POST /v1/completions` feeds `prompt` verbatim
//! - `GET /v1/models` lists the loaded model
//! - `GET /health` is `{"status":"ok"}` once the model is loaded, 503 before
//!
//! Both completion routes stream Server-Sent Events when `"stream": true`.
//! Generations run one at a time on a dedicated worker thread; requests
//! beyond the queue length get 503.

pub mod api;
pub mod engine;

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};

use axum::routing::{get, post};
use axum::Router;
use pocketlm_core::{ChatTemplate, Model, ModelError};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use engine::{Busy, Engine, EngineEvent, Finished, Job};

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_QUEUE_LEN: usize = 8;
pub const DEFAULT_MAX_TOKENS: usize = 256;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    /// Requests allowed to wait behind the running one.
    pub queue_len: usize,
    /// Context size per request; `None` uses the model maximum.
    pub ctx: Option<usize>,
    pub template: ChatTemplate,
    pub default_max_tokens: usize,
    /// Origin allowed by CORS. CORS is off when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: DEFAULT_HOST.into(),
            port: DEFAULT_PORT,
            queue_len: DEFAULT_QUEUE_LEN,
            ctx: None,
            template: ChatTemplate::default(),
            default_max_tokens: DEFAULT_MAX_TOKENS,
            cors_origin: None,
        }
    }
}

struct Inner {
    config: ServerConfig,
    engine: OnceLock<Engine>,
}

/// Shared handler state. The model slot is filled once, possibly after the
/// listener is already up.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        Self(Arc::new(Inner {
            config,
            engine: OnceLock::new(),
        }))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.0.config
    }

    pub fn engine(&self) -> Option<&Engine> {
        self.0.engine.get()
    }

    /// Starts the engine for `model`. Later calls are ignored.
    pub fn set_model(&self, model: Arc<Model>) -> Result<&Engine, ModelError> {
        if let Some(e) = self.engine() {
            return Ok(e);
        }
        let ctx = self.config().ctx.unwrap_or(model.config.ctx_max);
        let engine = Engine::start(model, ctx, self.config().queue_len)?;
        Ok(self.0.engine.get_or_init(|| engine))
    }
}

pub fn router(state: AppState) -> Router {
    let cors = state.config().cors_origin.clone();
    let router = Router::new()
        .route("/v1/chat/completions", post(api::chat_completions))
        .route("/v1/completions", post(api::completions))
        .route("/v1/models", get(api::models))
        .route("/health", get(api::health))
        .with_state(state);
    match cors {
        Some(origin) => router.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::exact(
                    origin.parse().expect("validated CORS origin"),
                ))
                .allow_methods(tower_http::cors::Any)
                .allow_headers(tower_http::cors::Any),
        ),
        None => router,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("invalid listen address {0:?}")]
    Address(String),
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn listen_addr(config: &ServerConfig) -> Result<SocketAddr, ServeError> {
    let text = format!("{}:{}", config.host, config.port);
    text.parse().map_err(|_| ServeError::Address(text))
}

/// Binds, then serves until the process ends. `load` runs on a blocking
/// thread after the listener is up; `/health` answers 503 until it returns.
pub async fn serve<F>(config: ServerConfig, load: F) -> Result<(), ServeError>
where
    F: FnOnce() -> Result<Arc<Model>, String> + Send + 'static,
{
    if let Some(origin) = &config.cors_origin {
        origin
            .parse::<axum::http::HeaderValue>()
            .map_err(|_| ServeError::Cors(origin.clone()))?;
    }
    let addr = listen_addr(&config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let state = AppState::new(config);
    let loader_state = state.clone();
    tokio::task::spawn_blocking(move || match load() {
        Ok(model) => match loader_state.set_model(model) {
            Ok(_) => log::info!("model loaded"),
            Err(e) => log::error!("cannot start engine: {e}"),
        },
        Err(e) => log::error!("model load failed: {e}"),
    });
    axum::serve(listener, router(state)).await?;
    Ok(())
}
