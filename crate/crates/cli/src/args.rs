use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pocketlm_core::quant::DType;
use pocketlm_core::sampler::{
    DEFAULT_REPEAT_PENALTY, DEFAULT_REPEAT_WINDOW, DEFAULT_TEMPERATURE, DEFAULT_TOP_K, DEFAULT_TOP_P,
};
use pocketlm_core::SamplerParams;

#[derive(Debug, Parser)]
#[command(name = "pocketlm", version, about = "Run small quantized language models on the CPU")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model file (PLM1 container).
    #[arg(short, long, global = true, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Context size in tokens. Defaults to the model maximum.
    #[arg(long, global = true, value_name = "N")]
    pub ctx: Option<usize>,
    /// Worker threads for the matrix kernels. Defaults to all cores.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Chat template: orca-mini or raw.
    #[arg(long, global = true, default_value = "orca-mini", value_name = "NAME")]
    pub template: String,
    /// TOML file with `[prompt]` header overrides.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Sampling temperature; 0 is greedy.
    #[arg(long = "temp", global = true, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f32,
    /// Keep only the k most likely tokens; 0 disables.
    #[arg(long, global = true, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Nucleus sampling mass.
    #[arg(long, global = true, default_value_t = DEFAULT_TOP_P)]
    pub top_p: f32,
    /// Penalty for recently seen tokens; 1 disables.
    #[arg(long, global = true, default_value_t = DEFAULT_REPEAT_PENALTY)]
    pub repeat_penalty: f32,
    /// How many recent tokens the penalty looks at.
    #[arg(long, global = true, default_value_t = DEFAULT_REPEAT_WINDOW)]
    pub repeat_window: usize,
    /// RNG seed. Random when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl SamplingArgs {
    pub fn params(&self) -> SamplerParams {
        SamplerParams {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            repeat_penalty: self.repeat_penalty,
            repeat_window: self.repeat_window,
            seed: self.seed.unwrap_or_else(SamplerParams::random_seed),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Interactive chat.
    Chat(ChatArgs),
    /// Generate one reply and exit.
    Run(RunArgs),
    /// Serve the OpenAI-compatible HTTP API.
    Serve(ServeArgs),
    /// Re-encode a float model into a quantized format.
    Quantize(QuantizeArgs),
    /// Print a model file's metadata and tensor table.
    Inspect(InspectArgs),
    /// Measure prefill and decode throughput.
    Bench(BenchArgs),
    /// Write a small random model for trying things out.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ChatArgs {
    /// System prompt. The template default is used when absent.
    #[arg(long)]
    pub system: Option<String>,
    /// Reply length limit per turn.
    #[arg(short = 'n', long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Prompt text. Read from stdin when absent.
    #[arg(short, long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub system: Option<String>,
    #[arg(short = 'n', long, default_value_t = 256)]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = pocketlm_server::DEFAULT_HOST)]
    pub host: String,
    #[arg(long, default_value_t = pocketlm_server::DEFAULT_PORT)]
    pub port: u16,
    /// Requests allowed to wait behind the running one.
    #[arg(long, default_value_t = pocketlm_server::DEFAULT_QUEUE_LEN)]
    pub queue_len: usize,
    /// Default `max_tokens` for requests that omit it.
    #[arg(long, default_value_t = pocketlm_server::DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    /// Origin allowed by CORS, e.g. http://localhost:5173.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    /// Output file.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Target type: F32, F16, BQ8, BQ4 or BQ5S.
    #[arg(short = 't', long = "type", value_parser = parse_dtype)]
    pub dtype: DType,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// File to inspect. Falls back to --model.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub prompt_tokens: usize,
    #[arg(long, default_value_t = 128)]
    pub gen_tokens: usize,
    /// Timed repetitions; the median is reported.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub repeat: u16,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output file.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(short = 't', long = "type", value_parser = parse_dtype, default_value = "F32")]
    pub dtype: DType,
    /// Seed for the random weights.
    #[arg(long, default_value_t = 7)]
    pub weights_seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 320)]
    pub vocab: usize,
    #[arg(long, default_value_t = 512)]
    pub ctx_max: usize,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    DType::from_name(s).ok_or_else(|| format!("unknown type {s:?}"))
}
