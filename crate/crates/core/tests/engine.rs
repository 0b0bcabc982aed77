use std::ops::ControlFlow;

use pocketlm_core::quant::{self, DType};
use pocketlm_core::reference::ReferenceModel;
use pocketlm_core::synth::TinySpec;
use pocketlm_core::{
    load_model, FinishReason, Model, ModelContainer, SamplerParams, Session, StopConditions,
    TokenId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn parity_spec(seed: u64, dtype: DType) -> TinySpec {
    TinySpec {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        n_kv_heads: 2,
        d_ff: 256,
        vocab_size: 256,
        ctx_max: 32,
        dtype,
        seed,
        ..TinySpec::default()
    }
}

fn random_tokens(seed: u64, n: usize, vocab: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn no_eos(max_tokens: usize) -> StopConditions {
    StopConditions {
        eos: false,
        ..StopConditions::max_tokens(max_tokens)
    }
}

fn greedy_run(m: &Model, s: &mut Session, prompt: &[TokenId], n: usize) -> Vec<TokenId> {
    m.generate(s, prompt, &SamplerParams::greedy(), &no_eos(n), |_| ControlFlow::Continue(()))
        .unwrap()
        .tokens
}

#[test]
fn matches_reference_on_twenty_models() {
    for seed in 0..20 {
        for dtype in DType::ALL {
            let c = parity_spec(seed, dtype).build();
            let model = load_model(&c).unwrap();
            let oracle = ReferenceModel::from_container(&c).unwrap();
            let tokens = random_tokens(seed, 8, 256);
            let want = oracle.logits(&tokens);
            let mut s = model.new_session();
            for (pos, &t) in tokens.iter().enumerate() {
                let got = model.forward(&mut s, t).unwrap();
                let err = got
                    .iter()
                    .zip(&want[pos])
                    .map(|(a, b)| (*a as f64 - b).abs())
                    .fold(0.0, f64::max);
                assert!(err <= 1e-4, "seed {seed} {dtype} pos {pos}: {err}");
            }
        }
    }
}

#[test]
fn quantized_parity_models_use_block_formats() {
    for dtype in [DType::Bq8, DType::Bq4, DType::Bq5s] {
        let m = load_model(&parity_spec(0, dtype).build()).unwrap();
        assert!(m.report.params_by_dtype.contains_key(dtype.name()), "{dtype}");
    }
}

#[test]
fn prefill_matches_sequential_forward() {
    let m = load_model(&TinySpec::default().build()).unwrap();
    let tokens = random_tokens(1, 16, m.config.vocab_size);
    let mut a = m.new_session();
    let batched = m.prefill(&mut a, &tokens).unwrap();
    let mut b = m.new_session();
    let mut seq = Vec::new();
    for &t in &tokens {
        seq = m.forward(&mut b, t).unwrap();
    }
    assert!(max_abs(&batched, &seq) <= 1e-4);
    assert_eq!(a.history(), b.history());
}

#[test]
fn prefill_composes() {
    let m = load_model(&TinySpec::default().build()).unwrap();
    let tokens = random_tokens(2, 12, m.config.vocab_size);
    let mut whole = m.new_session();
    let l1 = m.prefill(&mut whole, &tokens).unwrap();
    let mut split = m.new_session();
    m.prefill(&mut split, &tokens[..5]).unwrap();
    let l2 = m.prefill(&mut split, &tokens[5..]).unwrap();
    assert!(max_abs(&l1, &l2) <= 1e-4);
}

#[test]
fn continuation_matches_single_call() {
    let m = load_model(&TinySpec::default().build()).unwrap();
    let prompt = random_tokens(3, 6, m.config.vocab_size);
    let mut one = m.new_session();
    let all = greedy_run(&m, &mut one, &prompt, 12);
    let mut two = m.new_session();
    let mut parts = greedy_run(&m, &mut two, &prompt, 5);
    parts.extend(greedy_run(&m, &mut two, &[], 7));
    assert_eq!(all, parts);
    assert_eq!(one.history(), two.history());
}

#[test]
fn causality() {
    let m = load_model(&TinySpec::default().build()).unwrap();
    let tokens = random_tokens(4, 20, m.config.vocab_size);
    let p = 9;
    let mut s = m.new_session();
    let snapshot = m.prefill(&mut s, &tokens[..p]).unwrap();
    m.prefill(&mut s, &tokens[p..]).unwrap();
    s.truncate(p - 1);
    let again = m.forward(&mut s, tokens[p - 1]).unwrap();
    assert_eq!(snapshot, again);
}

#[test]
fn greedy_identical_across_runs_and_threads() {
    let spec = TinySpec {
        d_model: 128,
        d_ff: 256,
        dtype: DType::Bq8,
        ..TinySpec::default()
    };
    let m = load_model(&spec.build()).unwrap();
    let prompt = random_tokens(5, 8, m.config.vocab_size);
    let params = SamplerParams { seed: 42, ..SamplerParams::greedy() };
    let run = || {
        let mut s = m.new_session();
        m.generate(&mut s, &prompt, &params, &no_eos(40), |_| ControlFlow::Continue(()))
            .unwrap()
            .tokens
    };
    let base = run();
    assert_eq!(base.len(), 40);
    assert_eq!(base, run());
    for n in [1, 2, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        assert_eq!(pool.install(run), base, "{n} threads");
    }
}

#[test]
fn seeded_sampling_repeats() {
    let m = load_model(&TinySpec::default().build()).unwrap();
    let params = SamplerParams { seed: 9, ..SamplerParams::default() };
    let run = || {
        let mut s = m.new_session();
        m.generate(&mut s, &[0, 10, 20], &params, &no_eos(30), |_| ControlFlow::Continue(()))
            .unwrap()
            .tokens
    };
    assert_eq!(run(), run());
}

#[test]
fn stop_text_from_greedy_trace() {
    // find a trace whose third token is a fresh multi-character piece
    for seed in 0..200 {
        let m = load_model(&TinySpec { seed, ..TinySpec::default() }.build()).unwrap();
        let prompt = random_tokens(seed, 4, m.config.vocab_size);
        let trace = greedy_run(&m, &mut m.new_session(), &prompt, 8);
        let piece = match std::str::from_utf8(m.vocab.piece(trace[2]).unwrap()) {
            Ok(p) if p.len() >= 2 => p.to_string(),
            _ => continue,
        };
        let before = m.vocab.decode(&trace[..2]).unwrap();
        if before.contains(&piece) || !before.is_char_boundary(before.len()) {
            continue;
        }
        let stops = no_eos(8).with_stop_texts([piece.clone()]);
        let mut streamed = String::new();
        let g = m
            .generate(&mut m.new_session(), &prompt, &SamplerParams::greedy(), &stops, |e| {
                streamed.push_str(e.text);
                ControlFlow::Continue(())
            })
            .unwrap();
        assert_eq!(g.finish_reason, FinishReason::StopText);
        assert_eq!(g.tokens, trace[..2]);
        assert_eq!(g.text, before);
        assert_eq!(streamed, before);
        assert_eq!(g.sampled, 3);
        return;
    }
    panic!("no suitable trace found");
}

#[test]
fn streamed_text_equals_result() {
    let m = load_model(&TinySpec::default().build()).unwrap();
    let mut streamed = String::new();
    let mut n_events = 0;
    let g = m
        .generate(
            &mut m.new_session(),
            &m.vocab.encode("the east", true),
            &SamplerParams { seed: 3, ..SamplerParams::default() },
            &StopConditions::max_tokens(40),
            |e| {
                streamed.push_str(e.text);
                n_events += e.token.is_some() as usize;
                ControlFlow::Continue(())
            },
        )
        .unwrap();
    assert_eq!(streamed, g.text);
    assert_eq!(n_events, g.tokens.len());
    assert_eq!(m.vocab.decode(&g.tokens).unwrap(), g.text);
}

#[test]
fn zero_weights_give_uniform_logits() {
    let src = TinySpec::default().build();
    let mut c = ModelContainer::new();
    for (k, v) in src.metadata() {
        c.set(k.clone(), v.clone());
    }
    for t in src.tensors() {
        let (_, data) = src.get_tensor(&t.name).unwrap();
        let bytes = if t.dims.len() == 1 {
            data.to_vec()
        } else {
            quant::quantize(&vec![0.0; t.n_elements() as usize], t.dtype).unwrap()
        };
        c.add_tensor(t.name.clone(), &t.dims, t.dtype, &bytes).unwrap();
    }
    let m = load_model(&c).unwrap();
    let logits = m.prefill(&mut m.new_session(), &[5, 6, 7]).unwrap();
    assert!(logits.iter().all(|&l| l == 0.0));
}

#[test]
fn kv_cache_size_is_exact() {
    let m = load_model(&TinySpec::default().build()).unwrap();
    let c = m.config;
    let s = Session::with_context(&c, 100).unwrap();
    assert_eq!(s.kv_bytes(), (c.n_layers * 2 * 100 * c.n_kv_heads * c.head_dim() * 4) as u64);
}
