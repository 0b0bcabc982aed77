//! Next-token sampling.
//!
//! The pipeline runs in a fixed order: repetition penalty, temperature,
//! top-k, softmax, top-p, then a draw from [`SamplerRng`]. A temperature of
//! zero skips all of it and returns the argmax. Ties always go to the lowest
//! token id.
//!
//! `SamplerRng` is ChaCha8 (the `rand_chacha` stream cipher RNG) seeded from
//! the 64-bit seed, so a seed reproduces the same draws on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("non-finite logit at index {0}")]
    NonFiniteLogits(usize),
    #[error("invalid sampler parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("empty logits")]
    Empty,
}

/// One user-facing sampler knob with its default. CLI flags and server JSON
/// fields are both derived from this table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerDefault {
    /// JSON field name and [`SamplerParams`] field name.
    pub field: &'static str,
    /// Long CLI flag, without the leading dashes.
    pub flag: &'static str,
    pub value: f64,
}

pub const DEFAULT_TEMPERATURE: f32 = 0.8;
pub const DEFAULT_TOP_K: usize = 40;
pub const DEFAULT_TOP_P: f32 = 0.95;
pub const DEFAULT_REPEAT_PENALTY: f32 = 1.1;
pub const DEFAULT_REPEAT_WINDOW: usize = 64;

pub const SAMPLER_DEFAULTS: [SamplerDefault; 5] = [
    SamplerDefault {
        field: "temperature",
        flag: "temp",
        value: 0.8,
    },
    SamplerDefault {
        field: "top_k",
        flag: "top-k",
        value: 40.0,
    },
    SamplerDefault {
        field: "top_p",
        flag: "top-p",
        value: 0.95,
    },
    SamplerDefault {
        field: "repeat_penalty",
        flag: "repeat-penalty",
        value: 1.1,
    },
    SamplerDefault {
        field: "repeat_window",
        flag: "repeat-window",
        value: 64.0,
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub temperature: f32,
    /// 0 disables top-k.
    pub top_k: usize,
    pub top_p: f32,
    pub repeat_penalty: f32,
    pub repeat_window: usize,
    pub seed: u64,
}

impl Default for SamplerParams {
    /// Table defaults with seed 0; callers wanting a random seed use
    /// [`SamplerParams::random_seed`].
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            top_k: DEFAULT_TOP_K,
            top_p: DEFAULT_TOP_P,
            repeat_penalty: DEFAULT_REPEAT_PENALTY,
            repeat_window: DEFAULT_REPEAT_WINDOW,
            seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn random_seed() -> u64 {
        rand::rng().random()
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |name, reason: &str| {
            Err(SamplerError::InvalidParam {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature", "must be a finite value >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p", "must be in (0, 1]");
        }
        if !(self.repeat_penalty.is_finite() && self.repeat_penalty >= 1.0) {
            return bad("repeat_penalty", "must be a finite value >= 1");
        }
        Ok(())
    }
}

/// Explicit sampler RNG state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerRng(ChaCha8Rng);

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        self.0.random()
    }
}

/// Index of the largest value; lowest index on ties.
pub fn argmax(logits: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Applies the repetition penalty to every distinct token of `window`.
pub fn apply_repeat_penalty(logits: &mut [f32], window: &[TokenId], penalty: f32) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = std::collections::HashSet::with_capacity(window.len());
    for &id in window {
        if !seen.insert(id) {
            continue;
        }
        if let Some(l) = logits.get_mut(id as usize) {
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Candidate distribution after the whole pipeline except the final draw,
/// as `(token, probability)` in descending-probability order (ties by id).
pub fn candidates(
    logits: &[f32],
    params: &SamplerParams,
    history: &[TokenId],
) -> Result<Vec<(TokenId, f64)>, SamplerError> {
    params.validate()?;
    if logits.is_empty() {
        return Err(SamplerError::Empty);
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(SamplerError::NonFiniteLogits(i));
    }
    if params.temperature == 0.0 {
        let best = argmax(logits).unwrap() as TokenId;
        return Ok(vec![(best, 1.0)]);
    }

    let mut penalized = logits.to_vec();
    let start = history.len().saturating_sub(params.repeat_window);
    apply_repeat_penalty(&mut penalized, &history[start..], params.repeat_penalty);

    let mut order: Vec<(TokenId, f32)> = penalized
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as TokenId, l))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if params.top_k > 0 {
        order.truncate(params.top_k);
    }

    // temperature scaling happens inside the exponent, in f64
    let t = params.temperature as f64;
    let max = order[0].1 as f64;
    let mut probs: Vec<(TokenId, f64)> = order
        .iter()
        .map(|&(id, l)| (id, ((l as f64 - max) / t).exp()))
        .collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    for p in &mut probs {
        p.1 /= total;
    }

    if params.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            cum += p.1;
            if cum >= params.top_p as f64 {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        let total: f64 = probs.iter().map(|p| p.1).sum();
        for p in &mut probs {
            p.1 /= total;
        }
    }
    Ok(probs)
}

/// Samples the next token.
pub fn sample(
    logits: &[f32],
    params: &SamplerParams,
    history: &[TokenId],
    rng: &mut SamplerRng,
) -> Result<TokenId, SamplerError> {
    let probs = candidates(logits, params, history)?;
    if probs.len() == 1 {
        return Ok(probs[0].0);
    }
    let u = rng.next_unit();
    let mut cum = 0.0;
    for &(id, p) in &probs {
        cum += p;
        if u < cum {
            return Ok(id);
        }
    }
    Ok(probs.last().unwrap().0)
}
