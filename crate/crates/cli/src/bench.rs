//! `bench`: wall-clock prefill and greedy decode throughput.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use pocketlm_core::sampler::argmax;
use pocketlm_core::{Model, Session, TokenId};
use serde::Serialize;

use crate::args::BenchArgs;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub threads: usize,
    pub ctx: usize,
    pub prompt_tokens: usize,
    pub gen_tokens: usize,
    pub prefill_tps: f64,
    pub decode_tps: f64,
    pub weight_bytes: u64,
    pub kv_bytes: u64,
    pub n_params: u64,
    pub bits_per_weight: f64,
}

/// Fixed, vocabulary-independent prompt: bos, then a stride through the ids.
pub fn bench_prompt(model: &Model, n: usize) -> Vec<TokenId> {
    let vocab = model.config.vocab_size as u64;
    let mut ids = vec![model.vocab.bos_id()];
    ids.extend((1..n as u64).map(|i| ((i * 7919 + 13) % vocab) as TokenId));
    ids.truncate(n);
    ids
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn rate(tokens: usize, d: Duration) -> f64 {
    tokens as f64 / d.as_secs_f64().max(1e-9)
}

pub fn run_bench(model: &Model, ctx: usize, args: &BenchArgs) -> Result<BenchReport, CliError> {
    if args.prompt_tokens == 0 || args.prompt_tokens >= ctx {
        return Err(CliError::Usage(format!(
            "--prompt-tokens must be in 1..{ctx} for a context of {ctx}"
        )));
    }
    let gen = args.gen_tokens.min(ctx - args.prompt_tokens);
    let prompt = bench_prompt(model, args.prompt_tokens);
    let mut session =
        Session::with_context(&model.config, ctx).map_err(|e| CliError::Usage(e.to_string()))?;
    let runtime = |e: pocketlm_core::ModelError| CliError::Runtime(e.to_string());

    let (mut prefill, mut decode) = (Vec::new(), Vec::new());
    for _ in 0..args.repeat {
        session.reset();
        let t = Instant::now();
        let mut logits = model.prefill(&mut session, &prompt).map_err(runtime)?;
        prefill.push(t.elapsed());
        let t = Instant::now();
        for _ in 0..gen {
            let next = argmax(&logits).expect("non-empty vocabulary") as TokenId;
            logits = model.forward(&mut session, next).map_err(runtime)?;
        }
        decode.push(t.elapsed());
    }
    Ok(BenchReport {
        model: model.name.clone(),
        threads: rayon::current_num_threads(),
        ctx,
        prompt_tokens: prompt.len(),
        gen_tokens: gen,
        prefill_tps: rate(prompt.len(), median(prefill)),
        decode_tps: rate(gen, median(decode)),
        weight_bytes: model.report.weight_bytes,
        kv_bytes: session.kv_bytes(),
        n_params: model.report.n_params,
        bits_per_weight: model.report.bits_per_weight,
    })
}

pub fn print_table(r: &BenchReport, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "model     {} ({} params, {:.2} bits/weight)", r.model, r.n_params, r.bits_per_weight)?;
    writeln!(out, "threads   {}", r.threads)?;
    writeln!(out, "weights   {} bytes", r.weight_bytes)?;
    writeln!(out, "kv cache  {} bytes (ctx {})", r.kv_bytes, r.ctx)?;
    writeln!(out, "prefill   {:>5} tokens  {:>10.1} tok/s", r.prompt_tokens, r.prefill_tps)?;
    writeln!(out, "decode    {:>5} tokens  {:>10.1} tok/s", r.gen_tokens, r.decode_tps)
}
