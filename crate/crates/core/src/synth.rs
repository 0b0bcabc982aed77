//! Deterministic random models for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{ModelContainer, Value};
use crate::convert::{encode_tensor, KEY_FILE_TYPE};
use crate::model::{names, ModelConfig, KEY_NAME};
use crate::quant::DType;
use crate::tokenizer::{TokenId, TokenType, Vocabulary};

/// Shape and seed of a synthetic model.
#[derive(Debug, Clone, PartialEq)]
pub struct TinySpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub ctx_max: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    /// Requested weight type; see [`crate::convert::storage_dtype`].
    pub dtype: DType,
    pub seed: u64,
}

impl Default for TinySpec {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 128,
            vocab_size: 320,
            ctx_max: 128,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            dtype: DType::F32,
            seed: 7,
        }
    }
}

impl TinySpec {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            ctx_max: self.ctx_max,
            rope_theta: self.rope_theta,
            norm_eps: self.norm_eps,
        }
    }

    /// Builds the container. Panics if the spec is not a valid config.
    pub fn build(&self) -> ModelContainer {
        self.build_filtered(|_| true)
    }

    /// Builds the container without the named tensor.
    pub fn build_without(&self, skip: &str) -> ModelContainer {
        self.build_filtered(|n| n != skip)
    }

    fn build_filtered(&self, keep: impl Fn(&str) -> bool) -> ModelContainer {
        let cfg = self.config();
        cfg.validate().expect("valid synthetic config");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut c = ModelContainer::new();
        c.set(KEY_NAME, Value::Str(format!("tiny-{}", self.seed)));
        cfg.write_metadata(&mut c);
        c.set(KEY_FILE_TYPE, Value::Str(self.dtype.name().to_string()));
        synth_vocab(self.vocab_size, &mut rng).write_metadata(&mut c);

        for (name, dims) in cfg.tensor_shapes() {
            let n: u64 = dims.iter().product();
            let values: Vec<f32> = if names::is_norm(&name) {
                (0..n).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect()
            } else {
                let a = if name == names::TOKEN_EMBD {
                    1.0
                } else {
                    2.0 / (dims[1] as f32).sqrt()
                };
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            if !keep(&name) {
                continue;
            }
            let (dtype, bytes) =
                encode_tensor(&name, &dims, &values, self.dtype).expect("finite weights");
            c.add_tensor(name, &dims, dtype, &bytes).expect("unique tensor names");
        }
        c
    }
}

/// Vocabulary of `size` tokens.
///
/// With exactly 256 tokens the vocabulary is the byte set alone and bytes
/// 0x02/0x03 double as begin/end of sequence. Larger vocabularies start with
/// `<s>` and `</s>` control tokens, then the 256 bytes, then merge tokens,
/// each the concatenation of two earlier tokens so that every one of them
/// is reachable by pair merging.
pub fn synth_vocab(size: usize, rng: &mut impl Rng) -> Vocabulary {
    assert!(size == 256 || size >= 258, "vocabulary size {size} unsupported");
    if size == 256 {
        let tokens = (0..=255u8).map(|b| vec![b]).collect();
        return Vocabulary::new(tokens, vec![0.0; 256], vec![TokenType::Byte; 256], 2, 3)
            .expect("complete byte set");
    }
    let mut tokens: Vec<Vec<u8>> = vec![b"<s>".to_vec(), b"</s>".to_vec()];
    let mut types = vec![TokenType::Control, TokenType::Control];
    tokens.extend((0..=255u8).map(|b| vec![b]));
    types.extend([TokenType::Byte; 256]);

    let mut pool: Vec<Vec<u8>> = b"etaoinshrdlu ".iter().map(|&b| vec![b]).collect();
    let mut seen = std::collections::HashSet::new();
    while tokens.len() < size {
        let a = &pool[rng.random_range(0..pool.len())];
        let b = &pool[rng.random_range(0..pool.len())];
        let merged = [a.as_slice(), b.as_slice()].concat();
        if merged.len() > 6 || !seen.insert(merged.clone()) {
            continue;
        }
        pool.push(merged.clone());
        tokens.push(merged);
        types.push(TokenType::Normal);
    }
    let scores = (0..size)
        .map(|i| if i < 258 { 0.0 } else { -((i - 258) as f32) })
        .collect();
    Vocabulary::new(tokens, scores, types, 0, 1 as TokenId).expect("complete byte set")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_and_is_deterministic() {
        let s = TinySpec::default();
        assert_eq!(s.build(), s.build());
        let other = TinySpec { seed: 8, ..s.clone() };
        assert_ne!(s.build(), other.build());
    }

    #[test]
    fn merges_are_reachable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = synth_vocab(400, &mut rng);
        for id in 258..400u32 {
            let text = String::from_utf8(v.token_bytes(id).unwrap().to_vec()).unwrap();
            let ids = v.encode(&text, false);
            assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }

    #[test]
    fn byte_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = synth_vocab(256, &mut rng);
        assert_eq!((v.bos_id(), v.eos_id()), (2, 3));
        assert_eq!(v.encode("hi", false), vec![b'h' as u32, b'i' as u32]);
    }
}
