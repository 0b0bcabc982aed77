//! CPU inference for small quantized llama-style language models.
//!
//! Models are stored in the PLM1 container ([`container`]), with weights
//! in F32, F16 or one of the block formats in [`quant`]. [`model::load_model`]
//! turns a container into a [`Model`], and a [`Session`] carries the KV
//! cache of one conversation.

pub mod container;
pub mod convert;
pub mod kernels;
pub mod model;
pub mod prompt;
pub mod quant;
pub mod sampler;
pub mod synth;
pub mod tokenizer;

#[cfg(any(test, feature = "reference"))]
pub mod reference;

pub use container::{ContainerError, ModelContainer, Value};
pub use model::{
    load_model, FinishReason, Generation, LoadReport, Model, ModelConfig, ModelError, Session,
    StopConditions, TokenEvent,
};
pub use prompt::{ChatMessage, ChatTemplate, OrcaMiniHeaders, Role};
pub use quant::DType;
pub use sampler::{SamplerParams, SamplerRng};
pub use tokenizer::{StreamDecoder, TokenId, Vocabulary};
