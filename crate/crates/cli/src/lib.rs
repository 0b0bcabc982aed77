//! The `pocketlm` command line.
//!
//! Every subcommand is a plain function over a loaded [`Model`] and generic
//! I/O so tests can drive it without a terminal.

pub mod args;
pub mod bench;
pub mod chat;
pub mod inspect;
pub mod quantize;

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use pocketlm_core::{load_model, ChatTemplate, Model, ModelContainer};
use pocketlm_server::ServeError;
use serde::Deserialize;
use thiserror::Error;

pub use args::{Cli, Command, CommonArgs, SamplingArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_LOAD: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Load(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Load(_) => EXIT_LOAD,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Contents of the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub prompt: PromptConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub system_header: Option<String>,
    pub user_header: Option<String>,
    pub response_header: Option<String>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Resolves `--template` and any header overrides from `--config`.
pub fn resolve_template(common: &CommonArgs) -> Result<ChatTemplate, CliError> {
    let mut template: ChatTemplate = common
        .template
        .parse()
        .map_err(|e| CliError::Usage(format!("{e}")))?;
    let Some(path) = &common.config else {
        return Ok(template);
    };
    let p = FileConfig::read(path)?.prompt;
    if let ChatTemplate::OrcaMini(h) = &mut template {
        for (slot, value) in [
            (&mut h.system_header, p.system_header),
            (&mut h.user_header, p.user_header),
            (&mut h.response_header, p.response_header),
        ] {
            if let Some(v) = value {
                if v.is_empty() {
                    return Err(CliError::Usage("prompt headers must not be empty".into()));
                }
                *slot = v;
            }
        }
    }
    Ok(template)
}

pub fn model_path(common: &CommonArgs) -> Result<&Path, CliError> {
    common
        .model
        .as_deref()
        .ok_or_else(|| CliError::Usage("--model is required".into()))
}

/// Opens and validates a model file. Errors name the file and the part that
/// is missing or corrupt.
pub fn load(path: &Path) -> Result<Model, CliError> {
    let container = ModelContainer::open(path)
        .map_err(|e| CliError::Load(format!("cannot read {}: {e}", path.display())))?;
    load_model(&container).map_err(|e| CliError::Load(format!("cannot load {}: {e}", path.display())))
}

/// `--ctx`, checked against the model, or the model maximum.
pub fn context_size(common: &CommonArgs, model: &Model) -> Result<usize, CliError> {
    match common.ctx {
        None => Ok(model.config.ctx_max),
        Some(n) if n >= 1 && n <= model.config.ctx_max => Ok(n),
        Some(n) => Err(CliError::Usage(format!(
            "--ctx {n} outside 1..={}",
            model.config.ctx_max
        ))),
    }
}

fn set_threads(threads: Option<u16>) {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
        {
            log::warn!("thread pool already set up: {e}");
        }
    }
}

/// Runs a parsed command line. `cancel` is raised by the interrupt handler.
pub fn execute(
    cli: Cli,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    cancel: &AtomicBool,
) -> Result<(), CliError> {
    let common = &cli.common;
    common
        .sampling
        .params()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    set_threads(common.threads);
    match &cli.command {
        Command::Chat(a) => {
            let template = resolve_template(common)?;
            let model = load(model_path(common)?)?;
            let opts = chat::ChatOptions {
                params: common.sampling.params(),
                template,
                system: a.system.clone(),
                max_tokens: a.max_tokens,
                ctx: context_size(common, &model)?,
            };
            chat::run_chat(&model, &opts, input, out, cancel)
        }
        Command::Run(a) => {
            let template = resolve_template(common)?;
            let model = load(model_path(common)?)?;
            let prompt = match &a.prompt {
                Some(p) => p.clone(),
                None => {
                    let mut s = String::new();
                    input.read_to_string(&mut s)?;
                    s
                }
            };
            let opts = chat::ChatOptions {
                params: common.sampling.params(),
                template,
                system: a.system.clone(),
                max_tokens: Some(a.max_tokens),
                ctx: context_size(common, &model)?,
            };
            chat::run_once(&model, &opts, &prompt, out, cancel)
        }
        Command::Serve(a) => serve(common, a),
        Command::Quantize(a) => {
            let report = quantize::run_quantize(model_path(common)?, &a.out, a.dtype)?;
            quantize::print_report(&report, out)?;
            Ok(())
        }
        Command::Inspect(a) => {
            let path: PathBuf = match &a.path {
                Some(p) => p.clone(),
                None => model_path(common)?.to_path_buf(),
            };
            let container = ModelContainer::open(&path)
                .map_err(|e| CliError::Load(format!("cannot read {}: {e}", path.display())))?;
            inspect::dump(&container, out)?;
            Ok(())
        }
        Command::Bench(a) => {
            let model = load(model_path(common)?)?;
            let ctx = context_size(common, &model)?;
            let report = bench::run_bench(&model, ctx, a)?;
            if a.json {
                writeln!(out, "{}", serde_json::to_string(&report).expect("plain data"))?;
            } else {
                bench::print_table(&report, out)?;
            }
            Ok(())
        }
        Command::Synth(a) => {
            let spec = pocketlm_core::synth::TinySpec {
                n_layers: a.layers,
                d_model: a.d_model,
                d_ff: 2 * a.d_model,
                vocab_size: a.vocab,
                ctx_max: a.ctx_max,
                dtype: a.dtype,
                seed: a.weights_seed,
                ..Default::default()
            };
            if a.d_model == 0 || a.d_model % (2 * spec.n_heads) != 0 {
                return Err(CliError::Usage(format!(
                    "--d-model must be a positive multiple of {}",
                    2 * spec.n_heads
                )));
            }
            if a.vocab != 256 && a.vocab < 258 {
                return Err(CliError::Usage("--vocab must be 256 or at least 258".into()));
            }
            spec.build()
                .save(&a.out)
                .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", a.out.display())))?;
            writeln!(out, "wrote {}", a.out.display())?;
            Ok(())
        }
    }
}

fn serve(common: &CommonArgs, a: &args::ServeArgs) -> Result<(), CliError> {
    let template = resolve_template(common)?;
    let path = model_path(common)?.to_path_buf();
    let config = pocketlm_server::ServerConfig {
        host: a.host.clone(),
        port: a.port,
        queue_len: a.queue_len,
        ctx: common.ctx,
        template,
        default_max_tokens: a.max_tokens,
        cors_origin: a.cors_origin.clone(),
    };
    let ctx = common.ctx;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(pocketlm_server::serve(config, move || {
        // the listener is already up; a bad model ends the process
        let fail = |e: CliError| -> ! {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code())
        };
        let model = load(&path).unwrap_or_else(|e| fail(e));
        if let Some(n) = ctx {
            if n == 0 || n > model.config.ctx_max {
                fail(CliError::Usage(format!(
                    "--ctx {n} outside 1..={}",
                    model.config.ctx_max
                )));
            }
        }
        Ok(Arc::new(model))
    }))
    .map_err(|e| match e {
        ServeError::Io(e) => CliError::Runtime(e.to_string()),
        e => CliError::Usage(e.to_string()),
    })
}
