mod common;

use std::time::Duration;

use common::*;
use pocketlm_core::synth::TinySpec;
use pocketlm_core::{load_model, FinishReason, SamplerParams, StopConditions};
use pocketlm_server::{Engine, EngineEvent, Finished, Job};
use std::sync::Arc;

async fn finish(mut rx: tokio::sync::mpsc::UnboundedReceiver<EngineEvent>) -> (String, Finished) {
    let mut text = String::new();
    while let Some(e) = rx.recv().await {
        match e {
            EngineEvent::Delta(t) => text.push_str(&t),
            EngineEvent::Done(f) => return (text, f),
            EngineEvent::Failed(e) => panic!("{e}"),
        }
    }
    panic!("engine hung up");
}

#[tokio::test]
async fn usage_agrees_with_session_history() {
    let model = tiny_model();
    let engine = Engine::start(model.clone(), 512, 4).unwrap();
    let mut seen = std::collections::HashSet::new();
    for seed in 0..40 {
        let prompt = model.vocab.encode("the tea", true);
        let n_prompt = prompt.len();
        let job = Job {
            prompt,
            params: SamplerParams { seed, ..SamplerParams::default() },
            stops: StopConditions::max_tokens(12).with_stop_texts(["e".to_string()]),
        };
        let (text, f) = finish(engine.submit(job).unwrap()).await;
        let g = &f.generation;
        seen.insert(g.finish_reason);
        assert_eq!(text, g.text);
        assert_eq!(g.prompt_tokens, n_prompt);
        // a token cut by a stop string or an end-of-sequence token is
        // sampled but never fed back into the session
        let fed_back = match g.finish_reason {
            FinishReason::Eos | FinishReason::StopText => g.sampled - 1,
            _ => g.sampled,
        };
        assert_eq!(f.history_len, n_prompt + fed_back, "seed {seed}");
    }
    assert!(seen.contains(&FinishReason::StopText));
    assert!(seen.contains(&FinishReason::Length));
}

#[tokio::test]
async fn dropped_receiver_cancels_generation() {
    let spec = TinySpec {
        ctx_max: 4096,
        ..TinySpec::default()
    };
    let model = Arc::new(load_model(&spec.build()).unwrap());
    let engine = Engine::start(model, 4096, 1).unwrap();
    let job = Job {
        prompt: vec![0, 40, 41],
        params: SamplerParams::greedy(),
        stops: StopConditions {
            eos: false,
            ..StopConditions::max_tokens(4000)
        },
    };
    let mut rx = engine.submit(job).unwrap();
    assert!(matches!(rx.recv().await, Some(EngineEvent::Delta(_))));
    drop(rx);
    while engine.in_flight() > 0 {
        tokio::time::sleep(Duration::from_millis(1)).await;
    }
    let n = engine.tokens_sampled();
    assert!(n < 4000, "generated {n} tokens after disconnect");
}

#[tokio::test]
async fn request_abandoned_in_queue_is_skipped() {
    let engine = Engine::start(tiny_model(), 128, 2).unwrap();
    engine.pause();
    let job = Job {
        prompt: vec![0, 50],
        params: SamplerParams::greedy(),
        stops: StopConditions::max_tokens(10),
    };
    drop(engine.submit(job).unwrap());
    engine.resume();
    while engine.in_flight() > 0 {
        tokio::time::sleep(Duration::from_millis(1)).await;
    }
    assert_eq!(engine.tokens_sampled(), 0);
}
