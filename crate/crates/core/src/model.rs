//! Llama-style decoder: config, weights, KV-cache sessions and generation.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use serde::Serialize;
use thiserror::Error;

use crate::container::{ContainerError, ModelContainer, Value};
use crate::kernels::{self, KernelError, RopeTable, WeightView};
use crate::quant::DType;
use crate::sampler::{self, SamplerError, SamplerParams, SamplerRng};
use crate::tokenizer::{StreamDecoder, TokenId, TokenizerError, Vocabulary};

pub const KEY_ARCH: &str = "model.arch";
pub const ARCH: &str = "llama-like";
pub const KEY_N_LAYERS: &str = "model.n_layers";
pub const KEY_D_MODEL: &str = "model.d_model";
pub const KEY_N_HEADS: &str = "model.n_heads";
pub const KEY_N_KV_HEADS: &str = "model.n_kv_heads";
pub const KEY_D_FF: &str = "model.d_ff";
pub const KEY_VOCAB_SIZE: &str = "model.vocab_size";
pub const KEY_CTX_MAX: &str = "model.ctx_max";
pub const KEY_ROPE_THETA: &str = "model.rope_theta";
pub const KEY_NORM_EPS: &str = "model.norm_eps";
pub const KEY_NAME: &str = "general.name";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing or malformed metadata {key:?}: {reason}")]
    MissingMetadata { key: String, reason: String },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: {reason}")]
    ShapeMismatch { name: String, reason: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("context overflow: {needed} positions needed, context holds {ctx}")]
    ContextOverflow { needed: usize, ctx: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("prompt is empty and the session has no pending logits")]
    EmptyPrompt,
    #[error("forward pass produced a non-finite logit")]
    NonFiniteLogits,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub ctx_max: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::InvalidConfig(s));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("ctx_max", self.ctx_max),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head_dim {} is odd", self.head_dim()));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return bad("rope_theta must be positive".into());
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self, ModelError> {
        let missing = |key: &str, reason: &str| ModelError::MissingMetadata {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let int = |key: &str| -> Result<usize, ModelError> {
            c.get(key)
                .ok_or_else(|| missing(key, "absent"))?
                .as_u64()
                .and_then(|v| usize::try_from(v).ok())
                .ok_or_else(|| missing(key, "not an unsigned integer"))
        };
        let float = |key: &str| -> Result<f32, ModelError> {
            c.get(key)
                .ok_or_else(|| missing(key, "absent"))?
                .as_f32()
                .ok_or_else(|| missing(key, "not a float"))
        };
        match c.get(KEY_ARCH).and_then(Value::as_str) {
            Some(ARCH) => {}
            Some(other) => return Err(missing(KEY_ARCH, &format!("unsupported arch {other:?}"))),
            None => return Err(missing(KEY_ARCH, "absent")),
        }
        let cfg = Self {
            n_layers: int(KEY_N_LAYERS)?,
            d_model: int(KEY_D_MODEL)?,
            n_heads: int(KEY_N_HEADS)?,
            n_kv_heads: int(KEY_N_KV_HEADS)?,
            d_ff: int(KEY_D_FF)?,
            vocab_size: int(KEY_VOCAB_SIZE)?,
            ctx_max: int(KEY_CTX_MAX)?,
            rope_theta: float(KEY_ROPE_THETA)?,
            norm_eps: float(KEY_NORM_EPS)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_metadata(&self, c: &mut ModelContainer) {
        c.set(KEY_ARCH, Value::Str(ARCH.into()));
        c.set(KEY_N_LAYERS, Value::U32(self.n_layers as u32));
        c.set(KEY_D_MODEL, Value::U32(self.d_model as u32));
        c.set(KEY_N_HEADS, Value::U32(self.n_heads as u32));
        c.set(KEY_N_KV_HEADS, Value::U32(self.n_kv_heads as u32));
        c.set(KEY_D_FF, Value::U32(self.d_ff as u32));
        c.set(KEY_VOCAB_SIZE, Value::U32(self.vocab_size as u32));
        c.set(KEY_CTX_MAX, Value::U32(self.ctx_max as u32));
        c.set(KEY_ROPE_THETA, Value::F32(self.rope_theta));
        c.set(KEY_NORM_EPS, Value::F32(self.norm_eps));
    }

    /// Expected `(name, dims)` of every weight tensor, in file order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<u64>)> {
        let (d, kv, ff, v) = (
            self.d_model as u64,
            self.kv_dim() as u64,
            self.d_ff as u64,
            self.vocab_size as u64,
        );
        let mut out = vec![(names::TOKEN_EMBD.to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            out.push((names::attn_norm(l), vec![d]));
            out.push((names::attn_q(l), vec![d, d]));
            out.push((names::attn_k(l), vec![kv, d]));
            out.push((names::attn_v(l), vec![kv, d]));
            out.push((names::attn_o(l), vec![d, d]));
            out.push((names::ffn_norm(l), vec![d]));
            out.push((names::ffn_gate(l), vec![ff, d]));
            out.push((names::ffn_up(l), vec![ff, d]));
            out.push((names::ffn_down(l), vec![d, ff]));
        }
        out.push((names::OUTPUT_NORM.to_string(), vec![d]));
        out.push((names::OUTPUT.to_string(), vec![v, d]));
        out
    }

    pub fn n_params(&self) -> u64 {
        self.tensor_shapes()
            .iter()
            .map(|(_, dims)| dims.iter().product::<u64>())
            .sum()
    }

    /// KV cache size of a session holding `ctx` positions.
    pub fn kv_bytes(&self, ctx: usize) -> u64 {
        (self.n_layers * 2 * ctx * self.n_kv_heads * self.head_dim() * 4) as u64
    }
}

/// Tensor naming scheme.
pub mod names {
    pub const TOKEN_EMBD: &str = "token_embd";
    pub const OUTPUT_NORM: &str = "output_norm";
    pub const OUTPUT: &str = "output";

    pub fn attn_norm(l: usize) -> String {
        format!("blk.{l}.attn_norm")
    }
    pub fn attn_q(l: usize) -> String {
        format!("blk.{l}.attn_q")
    }
    pub fn attn_k(l: usize) -> String {
        format!("blk.{l}.attn_k")
    }
    pub fn attn_v(l: usize) -> String {
        format!("blk.{l}.attn_v")
    }
    pub fn attn_o(l: usize) -> String {
        format!("blk.{l}.attn_o")
    }
    pub fn ffn_norm(l: usize) -> String {
        format!("blk.{l}.ffn_norm")
    }
    pub fn ffn_gate(l: usize) -> String {
        format!("blk.{l}.ffn_gate")
    }
    pub fn ffn_up(l: usize) -> String {
        format!("blk.{l}.ffn_up")
    }
    pub fn ffn_down(l: usize) -> String {
        format!("blk.{l}.ffn_down")
    }

    /// Norm vectors stay F32 whatever the weight dtype.
    pub fn is_norm(name: &str) -> bool {
        name.ends_with("_norm")
    }
}

/// An owned weight matrix `[rows × cols]`.
#[derive(Debug, Clone)]
pub struct Matrix {
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
    data: Vec<u8>,
}

impl Matrix {
    pub fn view(&self) -> WeightView<'_> {
        WeightView::new(self.dtype, self.rows, self.cols, &self.data)
            .expect("matrix validated at load")
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub token_embd: Matrix,
    pub layers: Vec<LayerWeights>,
    pub output_norm: Vec<f32>,
    pub output: Matrix,
}

/// What `load_model` found in the container.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    pub n_params: u64,
    /// Encoded size of all weight tensors.
    pub weight_bytes: u64,
    /// `8 * weight_bytes / n_params`.
    pub bits_per_weight: f64,
    /// Parameter count per storage type.
    pub params_by_dtype: BTreeMap<String, u64>,
}

fn take_tensor<'c>(
    c: &'c ModelContainer,
    name: &str,
    dims: &[u64],
) -> Result<(DType, &'c [u8]), ModelError> {
    let (desc, data) = c.get_tensor(name).map_err(|e| match e {
        ContainerError::NotFound(n) => ModelError::MissingTensor(n),
        e => e.into(),
    })?;
    if desc.dims != dims {
        return Err(ModelError::ShapeMismatch {
            name: name.to_string(),
            reason: format!("dims {:?}, expected {:?}", desc.dims, dims),
        });
    }
    Ok((desc.dtype, data))
}

fn load_matrix(c: &ModelContainer, name: &str, rows: usize, cols: usize) -> Result<Matrix, ModelError> {
    let (dtype, data) = take_tensor(c, name, &[rows as u64, cols as u64])?;
    WeightView::new(dtype, rows, cols, data).map_err(|e| ModelError::ShapeMismatch {
        name: name.to_string(),
        reason: e.to_string(),
    })?;
    Ok(Matrix {
        dtype,
        rows,
        cols,
        data: data.to_vec(),
    })
}

fn load_norm(c: &ModelContainer, name: &str, d: usize) -> Result<Vec<f32>, ModelError> {
    let (dtype, data) = take_tensor(c, name, &[d as u64])?;
    if dtype != DType::F32 {
        return Err(ModelError::ShapeMismatch {
            name: name.to_string(),
            reason: format!("norm weights must be F32, found {dtype}"),
        });
    }
    Ok(data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// A loaded model: immutable, shareable across threads and sessions.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub config: ModelConfig,
    pub weights: Weights,
    pub vocab: Vocabulary,
    pub report: LoadReport,
}

/// Builds a [`Model`] from a validated container.
pub fn load_model(c: &ModelContainer) -> Result<Model, ModelError> {
    let config = ModelConfig::from_container(c)?;
    let vocab = Vocabulary::from_container(c)?;
    if vocab.len() != config.vocab_size {
        return Err(ModelError::MissingMetadata {
            key: KEY_VOCAB_SIZE.into(),
            reason: format!(
                "{} but tokenizer has {} tokens",
                config.vocab_size,
                vocab.len()
            ),
        });
    }
    let (d, kv, ff, v) = (config.d_model, config.kv_dim(), config.d_ff, config.vocab_size);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: load_norm(c, &names::attn_norm(l), d)?,
            wq: load_matrix(c, &names::attn_q(l), d, d)?,
            wk: load_matrix(c, &names::attn_k(l), kv, d)?,
            wv: load_matrix(c, &names::attn_v(l), kv, d)?,
            wo: load_matrix(c, &names::attn_o(l), d, d)?,
            ffn_norm: load_norm(c, &names::ffn_norm(l), d)?,
            w_gate: load_matrix(c, &names::ffn_gate(l), ff, d)?,
            w_up: load_matrix(c, &names::ffn_up(l), ff, d)?,
            w_down: load_matrix(c, &names::ffn_down(l), d, ff)?,
        });
    }
    let weights = Weights {
        token_embd: load_matrix(c, names::TOKEN_EMBD, v, d)?,
        layers,
        output_norm: load_norm(c, names::OUTPUT_NORM, d)?,
        output: load_matrix(c, names::OUTPUT, v, d)?,
    };

    let mut params_by_dtype = BTreeMap::new();
    let mut weight_bytes = 0u64;
    let mut n_params = 0u64;
    for (name, _) in config.tensor_shapes() {
        let (desc, data) = c.get_tensor(&name)?;
        let n = desc.n_elements();
        *params_by_dtype.entry(desc.dtype.name().to_string()).or_insert(0) += n;
        weight_bytes += data.len() as u64;
        n_params += n;
    }
    let report = LoadReport {
        n_params,
        weight_bytes,
        bits_per_weight: 8.0 * weight_bytes as f64 / n_params as f64,
        params_by_dtype,
    };
    let name = c
        .get(KEY_NAME)
        .and_then(Value::as_str)
        .unwrap_or("unnamed")
        .to_string();
    Ok(Model {
        name,
        config,
        weights,
        vocab,
        report,
    })
}

#[derive(Debug, Clone)]
struct Scratch {
    x: Vec<f32>,
    xb: Vec<f32>,
    xb2: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    att: Vec<f32>,
    hb: Vec<f32>,
    hb2: Vec<f32>,
}

/// Mutable decoding state for one sequence.
#[derive(Debug, Clone)]
pub struct Session {
    ctx: usize,
    kv_dim: usize,
    /// Per layer `[ctx × kv_dim]`.
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    history: Vec<TokenId>,
    last_logits: Option<Vec<f32>>,
    scratch: Scratch,
}

impl Session {
    /// Session using the model's full context.
    pub fn new(config: &ModelConfig) -> Self {
        Self::with_context(config, config.ctx_max).expect("ctx_max is valid")
    }

    pub fn with_context(config: &ModelConfig, ctx: usize) -> Result<Self, ModelError> {
        if ctx == 0 || ctx > config.ctx_max {
            return Err(ModelError::InvalidConfig(format!(
                "context {ctx} outside 1..={}",
                config.ctx_max
            )));
        }
        let kv_dim = config.kv_dim();
        Ok(Self {
            ctx,
            kv_dim,
            k_cache: vec![vec![0.0; ctx * kv_dim]; config.n_layers],
            v_cache: vec![vec![0.0; ctx * kv_dim]; config.n_layers],
            history: Vec::new(),
            last_logits: None,
            scratch: Scratch {
                x: vec![0.0; config.d_model],
                xb: vec![0.0; config.d_model],
                xb2: vec![0.0; config.d_model],
                q: vec![0.0; config.d_model],
                k: vec![0.0; kv_dim],
                v: vec![0.0; kv_dim],
                att: vec![0.0; ctx],
                hb: vec![0.0; config.d_ff],
                hb2: vec![0.0; config.d_ff],
            },
        })
    }

    /// Tokens consumed so far.
    pub fn pos(&self) -> usize {
        self.history.len()
    }

    pub fn ctx(&self) -> usize {
        self.ctx
    }

    pub fn remaining(&self) -> usize {
        self.ctx - self.pos()
    }

    pub fn history(&self) -> &[TokenId] {
        &self.history
    }

    /// Logits produced by the most recent forward step, if still valid.
    pub fn last_logits(&self) -> Option<&[f32]> {
        self.last_logits.as_deref()
    }

    pub fn kv_bytes(&self) -> u64 {
        (self.k_cache.len() * 2 * self.ctx * self.kv_dim * 4) as u64
    }

    /// Rewinds to the first `len` tokens. Cache rows past `len` are simply
    /// overwritten by later steps.
    pub fn truncate(&mut self, len: usize) {
        if len < self.history.len() {
            self.history.truncate(len);
            self.last_logits = None;
        }
    }

    pub fn reset(&mut self) {
        self.truncate(0);
    }
}

/// Why generation stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    StopText,
    Length,
    ContextFull,
    /// The per-token callback asked to stop.
    Cancelled,
}

#[derive(Debug, Clone)]
pub struct StopConditions {
    pub max_tokens: usize,
    pub stop_texts: Vec<String>,
    /// Stop when the end-of-sequence token is sampled.
    pub eos: bool,
}

impl StopConditions {
    pub fn max_tokens(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            stop_texts: Vec::new(),
            eos: true,
        }
    }

    pub fn with_stop_texts(mut self, stops: impl IntoIterator<Item = String>) -> Self {
        self.stop_texts
            .extend(stops.into_iter().filter(|s| !s.is_empty()));
        self
    }
}

/// Text that became safe to show after a sampled token. `token` is `None`
/// for the final flush.
#[derive(Debug, Clone, Copy)]
pub struct TokenEvent<'a> {
    pub token: Option<TokenId>,
    pub text: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens, excluding end-of-sequence and anything from a stop text on.
    pub tokens: Vec<TokenId>,
    /// Decoded text of `tokens`, cut right before a matched stop text.
    pub text: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: usize,
    /// Number of sampler draws, including an end-of-sequence token or tokens
    /// dropped by a stop text.
    pub sampled: usize,
}

/// Length of the longest suffix of `text` that is a proper prefix of a stop string.
fn partial_stop_len(text: &str, stops: &[String]) -> usize {
    let mut held = 0;
    for s in stops {
        for k in (1..s.len()).rev() {
            if k <= held {
                break;
            }
            if s.is_char_boundary(k) && text.ends_with(&s[..k]) {
                held = k;
                break;
            }
        }
    }
    held
}

fn find_stop(text: &str, stops: &[String]) -> Option<usize> {
    stops.iter().filter_map(|s| text.find(s.as_str())).min()
}

impl Model {
    pub fn new_session(&self) -> Session {
        Session::new(&self.config)
    }

    /// Runs one decoder step and returns the logits for the next position.
    pub fn forward(&self, session: &mut Session, token: TokenId) -> Result<Vec<f32>, ModelError> {
        self.step(session, token, true)?;
        Ok(session.last_logits.clone().unwrap())
    }

    /// Feeds `tokens` and returns the logits after the last one.
    pub fn prefill(&self, session: &mut Session, tokens: &[TokenId]) -> Result<Vec<f32>, ModelError> {
        let Some((&last, head)) = tokens.split_last() else {
            return Err(ModelError::EmptyPrompt);
        };
        if session.pos() + tokens.len() > session.ctx {
            return Err(ModelError::ContextOverflow {
                needed: session.pos() + tokens.len(),
                ctx: session.ctx,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        for &t in head {
            self.step(session, t, false)?;
        }
        self.forward(session, last)
    }

    fn step(&self, s: &mut Session, token: TokenId, want_logits: bool) -> Result<(), ModelError> {
        let cfg = &self.config;
        let pos = s.pos();
        if pos >= s.ctx {
            return Err(ModelError::ContextOverflow {
                needed: pos + 1,
                ctx: s.ctx,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let w = &self.weights;
        let hd = cfg.head_dim();
        let kv_dim = cfg.kv_dim();
        let group = cfg.n_heads / cfg.n_kv_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let rope = RopeTable::new(pos, hd, cfg.rope_theta)?;
        let sc = &mut s.scratch;

        kernels::dequantize_row(&w.token_embd.view(), token as usize, &mut sc.x);

        for (l, lw) in w.layers.iter().enumerate() {
            kernels::rmsnorm_into(&sc.x, &lw.attn_norm, cfg.norm_eps, &mut sc.xb)?;
            kernels::matvec_into(&lw.wq.view(), &sc.xb, &mut sc.q)?;
            kernels::matvec_into(&lw.wk.view(), &sc.xb, &mut sc.k)?;
            kernels::matvec_into(&lw.wv.view(), &sc.xb, &mut sc.v)?;
            for head in sc.q.chunks_exact_mut(hd) {
                rope.apply(head);
            }
            for head in sc.k.chunks_exact_mut(hd) {
                rope.apply(head);
            }
            let row = pos * kv_dim;
            s.k_cache[l][row..row + kv_dim].copy_from_slice(&sc.k);
            s.v_cache[l][row..row + kv_dim].copy_from_slice(&sc.v);

            let kc = &s.k_cache[l];
            let vc = &s.v_cache[l];
            // attention reads cache rows 0..=pos only, which is the causal mask
            for h in 0..cfg.n_heads {
                let q = &sc.q[h * hd..(h + 1) * hd];
                let kv_off = (h / group) * hd;
                let att = &mut sc.att[..=pos];
                for (t, a) in att.iter_mut().enumerate() {
                    let k = &kc[t * kv_dim + kv_off..t * kv_dim + kv_off + hd];
                    *a = kernels::dot(q, k) * scale;
                }
                kernels::softmax_in_place(att)?;
                let out = &mut sc.xb[h * hd..(h + 1) * hd];
                out.fill(0.0);
                for (t, &a) in att.iter().enumerate() {
                    let v = &vc[t * kv_dim + kv_off..t * kv_dim + kv_off + hd];
                    for (o, &vi) in out.iter_mut().zip(v) {
                        *o += a * vi;
                    }
                }
            }
            kernels::matvec_into(&lw.wo.view(), &sc.xb, &mut sc.xb2)?;
            for (x, d) in sc.x.iter_mut().zip(&sc.xb2) {
                *x += d;
            }

            kernels::rmsnorm_into(&sc.x, &lw.ffn_norm, cfg.norm_eps, &mut sc.xb)?;
            kernels::matvec_into(&lw.w_gate.view(), &sc.xb, &mut sc.hb)?;
            kernels::matvec_into(&lw.w_up.view(), &sc.xb, &mut sc.hb2)?;
            for (g, &u) in sc.hb.iter_mut().zip(&sc.hb2) {
                *g = kernels::silu_scalar(*g) * u;
            }
            kernels::matvec_into(&lw.w_down.view(), &sc.hb, &mut sc.xb2)?;
            for (x, d) in sc.x.iter_mut().zip(&sc.xb2) {
                *x += d;
            }
        }

        s.history.push(token);
        if want_logits {
            kernels::rmsnorm_into(&sc.x, &w.output_norm, cfg.norm_eps, &mut sc.xb)?;
            let mut logits = s.last_logits.take().unwrap_or_default();
            logits.resize(cfg.vocab_size, 0.0);
            kernels::matvec_into(&w.output.view(), &sc.xb, &mut logits)?;
            if logits.iter().any(|v| !v.is_finite()) {
                s.last_logits = None;
                return Err(ModelError::NonFiniteLogits);
            }
            s.last_logits = Some(logits);
        } else {
            s.last_logits = None;
        }
        Ok(())
    }

    /// Prefills `prompt` (or continues from the session's pending logits when
    /// `prompt` is empty) and samples until a stop condition holds.
    ///
    /// `on_token` sees each sampled token with the text that is safe to show:
    /// complete UTF-8 that cannot be the start of a stop string. Returning
    /// `ControlFlow::Break` cancels at that token boundary.
    pub fn generate<F>(
        &self,
        session: &mut Session,
        prompt: &[TokenId],
        params: &SamplerParams,
        stops: &StopConditions,
        mut on_token: F,
    ) -> Result<Generation, ModelError>
    where
        F: FnMut(TokenEvent<'_>) -> ControlFlow<()>,
    {
        params.validate()?;
        if session.pos() + prompt.len() > session.ctx {
            return Err(ModelError::ContextOverflow {
                needed: session.pos() + prompt.len(),
                ctx: session.ctx,
            });
        }
        let mut logits = if prompt.is_empty() {
            session
                .last_logits
                .clone()
                .ok_or(ModelError::EmptyPrompt)?
        } else {
            self.prefill(session, prompt)?
        };

        let mut rng = SamplerRng::new(params.seed);
        let mut decoder = StreamDecoder::new();
        let mut tokens = Vec::new();
        let mut token_ends = Vec::new();
        let mut text = String::new();
        let mut emitted = 0usize;
        let mut sampled = 0usize;

        let finish = loop {
            if tokens.len() >= stops.max_tokens {
                break FinishReason::Length;
            }
            if session.pos() >= session.ctx {
                break FinishReason::ContextFull;
            }
            let window_start = session.history.len().saturating_sub(params.repeat_window);
            let token = sampler::sample(
                &logits,
                params,
                &session.history[window_start..],
                &mut rng,
            )?;
            sampled += 1;
            if stops.eos && token == self.vocab.eos_id() {
                break FinishReason::Eos;
            }
            text.push_str(&decoder.push(&self.vocab, token)?);
            tokens.push(token);
            token_ends.push(text.len());

            if let Some(at) = find_stop(&text, &stops.stop_texts) {
                text.truncate(at);
                let keep = token_ends.iter().take_while(|&&end| end <= at).count();
                tokens.truncate(keep);
                if at > emitted {
                    let _ = on_token(TokenEvent {
                        token: None,
                        text: &text[emitted..],
                    });
                }
                return Ok(Generation {
                    tokens,
                    text,
                    finish_reason: FinishReason::StopText,
                    prompt_tokens: prompt.len(),
                    sampled,
                });
            }

            let safe = text.len() - partial_stop_len(&text, &stops.stop_texts);
            let start = emitted;
            emitted = emitted.max(safe);
            let flow = on_token(TokenEvent {
                token: Some(token),
                text: &text[start..emitted],
            });
            // fed back even when cancelled, so the session matches `text`
            // and a later empty prompt continues from here
            logits = self.forward(session, token)?;
            if flow.is_break() {
                break FinishReason::Cancelled;
            }
        };

        text.push_str(&decoder.finish());
        if text.len() > emitted {
            let _ = on_token(TokenEvent {
                token: None,
                text: &text[emitted..],
            });
        }
        Ok(Generation {
            tokens,
            text,
            finish_reason: finish,
            prompt_tokens: prompt.len(),
            sampled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TinySpec;

    fn tiny() -> Model {
        load_model(&TinySpec::default().build()).unwrap()
    }

    #[test]
    fn load_reports_config() {
        let spec = TinySpec {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 4,
            vocab_size: 256,
            ..TinySpec::default()
        };
        let m = load_model(&spec.build()).unwrap();
        assert_eq!(m.config.n_layers, 2);
        assert_eq!(m.config.d_model, 64);
        assert_eq!(m.config.n_heads, 4);
        assert_eq!(m.config.vocab_size, 256);
        assert_eq!(m.report.n_params, m.config.n_params());
        assert_eq!(m.report.bits_per_weight, 32.0);
    }

    #[test]
    fn missing_gate_projection() {
        let c = TinySpec::default().build_without(&names::ffn_gate(1));
        match load_model(&c) {
            Err(ModelError::MissingTensor(n)) => assert_eq!(n, "blk.1.ffn_gate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_metadata() {
        let mut c = TinySpec::default().build();
        c.set(KEY_N_HEADS, Value::Str("four".into()));
        assert!(matches!(load_model(&c), Err(ModelError::MissingMetadata { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny();
        let mut a = m.new_session();
        let mut b = m.new_session();
        let la = m.prefill(&mut a, &[1, 2, 3, 4]).unwrap();
        let lb = m.prefill(&mut b, &[1, 2, 3, 4]).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.pos(), 4);
    }

    #[test]
    fn prefill_single_equals_forward() {
        let m = tiny();
        let mut a = m.new_session();
        let mut b = m.new_session();
        assert_eq!(m.prefill(&mut a, &[7]).unwrap(), m.forward(&mut b, 7).unwrap());
    }

    #[test]
    fn context_and_token_errors() {
        let m = tiny();
        let mut s = Session::with_context(&m.config, 2).unwrap();
        m.forward(&mut s, 1).unwrap();
        m.forward(&mut s, 1).unwrap();
        assert!(matches!(
            m.forward(&mut s, 1),
            Err(ModelError::ContextOverflow { .. })
        ));
        let mut s = m.new_session();
        assert!(matches!(
            m.forward(&mut s, 100_000),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        assert!(matches!(m.prefill(&mut s, &[]), Err(ModelError::EmptyPrompt)));
        assert!(Session::with_context(&m.config, m.config.ctx_max + 1).is_err());
    }

    #[test]
    fn kv_bytes_formula() {
        let m = tiny();
        let s = m.new_session();
        let c = m.config;
        assert_eq!(
            s.kv_bytes(),
            (c.n_layers * 2 * c.ctx_max * c.n_kv_heads * c.head_dim() * 4) as u64
        );
        assert_eq!(s.kv_bytes(), c.kv_bytes(c.ctx_max));
    }

    #[test]
    fn max_tokens_zero() {
        let m = tiny();
        let mut s = m.new_session();
        let g = m
            .generate(&mut s, &[1, 2], &SamplerParams::greedy(), &StopConditions::max_tokens(0), |_| {
                ControlFlow::Continue(())
            })
            .unwrap();
        assert!(g.tokens.is_empty());
        assert_eq!(g.finish_reason, FinishReason::Length);
    }

    #[test]
    fn prompt_too_long() {
        let m = tiny();
        let mut s = Session::with_context(&m.config, 4).unwrap();
        let r = m.generate(
            &mut s,
            &[1; 5],
            &SamplerParams::greedy(),
            &StopConditions::max_tokens(1),
            |_| ControlFlow::Continue(()),
        );
        assert!(matches!(r, Err(ModelError::ContextOverflow { .. })));
    }

    #[test]
    fn context_full_finish() {
        let m = tiny();
        let mut s = Session::with_context(&m.config, 6).unwrap();
        let stops = StopConditions {
            eos: false,
            ..StopConditions::max_tokens(100)
        };
        let g = m
            .generate(&mut s, &[1, 2], &SamplerParams::greedy(), &stops, |_| {
                ControlFlow::Continue(())
            })
            .unwrap();
        assert_eq!(g.finish_reason, FinishReason::ContextFull);
        assert_eq!(g.tokens.len(), 4);
        assert_eq!(s.pos(), 6);
    }

    #[test]
    fn cancel_from_callback() {
        let m = tiny();
        let mut s = m.new_session();
        let stops = StopConditions {
            eos: false,
            ..StopConditions::max_tokens(50)
        };
        let mut seen = 0;
        let g = m
            .generate(&mut s, &[1], &SamplerParams::greedy(), &stops, |e| {
                if e.token.is_some() {
                    seen += 1;
                }
                if seen == 3 {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .unwrap();
        assert_eq!(g.finish_reason, FinishReason::Cancelled);
        assert_eq!(g.tokens.len(), 3);
        assert_eq!(s.pos(), 1 + 3);
    }

    #[test]
    fn partial_stop_suffix() {
        let stops = vec!["### User:".to_string(), "xyz".to_string()];
        assert_eq!(partial_stop_len("hello ##", &stops), 2);
        assert_eq!(partial_stop_len("hello x", &stops), 1);
        assert_eq!(partial_stop_len("hello", &stops), 0);
        assert_eq!(find_stop("a xyz ### User:", &stops), Some(2));
    }
}
