//! Byte-fallback tokenizer driven by container metadata.
//!
//! Encoding starts from one byte token per input byte and repeatedly merges
//! the adjacent pair whose concatenation is a vocabulary entry with the
//! highest score (leftmost pair on ties) until no merge applies.
//!
//! In the container, byte tokens are spelled `<0xHH>`; normal and control
//! tokens are stored as their UTF-8 text.

use std::collections::HashMap;

use thiserror::Error;

use crate::container::{ModelContainer, Value};

pub const KEY_TOKENS: &str = "tokenizer.tokens";
pub const KEY_SCORES: &str = "tokenizer.scores";
pub const KEY_TYPES: &str = "tokenizer.types";
pub const KEY_BOS: &str = "tokenizer.bos_id";
pub const KEY_EOS: &str = "tokenizer.eos_id";

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("vocabulary metadata {key:?}: {reason}")]
    BadMetadata { key: &'static str, reason: String },
    #[error("vocabulary lacks a byte token for 0x{0:02X}")]
    MissingByte(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenType {
    Normal,
    Byte,
    Control,
}

impl TokenType {
    pub fn tag(self) -> u32 {
        match self {
            TokenType::Normal => 0,
            TokenType::Byte => 1,
            TokenType::Control => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(TokenType::Normal),
            1 => Some(TokenType::Byte),
            2 => Some(TokenType::Control),
            _ => None,
        }
    }
}

/// Spelling of byte token `b` in the container (`<0x0A>`).
pub fn byte_token_text(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_token(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    scores: Vec<f32>,
    types: Vec<TokenType>,
    bos_id: TokenId,
    eos_id: TokenId,
    byte_ids: [TokenId; 256],
    /// Byte string -> (id, score) of mergeable normal tokens.
    merges: HashMap<Vec<u8>, (TokenId, f32)>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw entries. `tokens` hold the decoded bytes
    /// (a byte token holds its single byte).
    pub fn new(
        tokens: Vec<Vec<u8>>,
        scores: Vec<f32>,
        types: Vec<TokenType>,
        bos_id: TokenId,
        eos_id: TokenId,
    ) -> Result<Self, TokenizerError> {
        let n = tokens.len();
        if scores.len() != n || types.len() != n {
            return Err(TokenizerError::BadMetadata {
                key: KEY_SCORES,
                reason: format!(
                    "{n} tokens but {} scores and {} types",
                    scores.len(),
                    types.len()
                ),
            });
        }
        for (key, id) in [(KEY_BOS, bos_id), (KEY_EOS, eos_id)] {
            if id as usize >= n {
                return Err(TokenizerError::BadMetadata {
                    key,
                    reason: format!("id {id} out of range for {n} tokens"),
                });
            }
        }
        let mut byte_ids = [TokenId::MAX; 256];
        let mut merges = HashMap::new();
        for (id, ((tok, ty), &score)) in tokens.iter().zip(&types).zip(&scores).enumerate() {
            match ty {
                TokenType::Byte => {
                    if tok.len() != 1 {
                        return Err(TokenizerError::BadMetadata {
                            key: KEY_TOKENS,
                            reason: format!("byte token {id} is {} bytes long", tok.len()),
                        });
                    }
                    let slot = &mut byte_ids[tok[0] as usize];
                    if *slot == TokenId::MAX {
                        *slot = id as TokenId;
                    }
                }
                TokenType::Normal if tok.len() >= 2 => {
                    merges.entry(tok.clone()).or_insert((id as TokenId, score));
                }
                _ => {}
            }
        }
        if let Some(b) = byte_ids.iter().position(|&id| id == TokenId::MAX) {
            return Err(TokenizerError::MissingByte(b as u8));
        }
        Ok(Self {
            tokens,
            scores,
            types,
            bos_id,
            eos_id,
            byte_ids,
            merges,
        })
    }

    /// Loads `tokenizer.*` metadata.
    pub fn from_container(c: &ModelContainer) -> Result<Self, TokenizerError> {
        fn array<'a>(c: &'a ModelContainer, key: &'static str) -> Result<&'a [Value], TokenizerError> {
            c.get(key)
                .and_then(Value::as_array)
                .map(|a| a.items())
                .ok_or(TokenizerError::BadMetadata {
                    key,
                    reason: "missing or not an array".into(),
                })
        }
        fn id(c: &ModelContainer, key: &'static str) -> Result<TokenId, TokenizerError> {
            c.get(key)
                .and_then(Value::as_u64)
                .and_then(|v| TokenId::try_from(v).ok())
                .ok_or(TokenizerError::BadMetadata {
                    key,
                    reason: "missing or not an unsigned integer".into(),
                })
        }
        let bad = |key, reason: &str| TokenizerError::BadMetadata {
            key,
            reason: reason.to_string(),
        };

        let types = array(c, KEY_TYPES)?
            .iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|t| TokenType::from_tag(t as u32))
                    .ok_or_else(|| bad(KEY_TYPES, "unknown token type"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scores = array(c, KEY_SCORES)?
            .iter()
            .map(|v| v.as_f32().ok_or_else(|| bad(KEY_SCORES, "score is not a float")))
            .collect::<Result<Vec<_>, _>>()?;
        let texts = array(c, KEY_TOKENS)?;
        if texts.len() != types.len() {
            return Err(bad(KEY_TOKENS, "token and type counts differ"));
        }
        let tokens = texts
            .iter()
            .zip(&types)
            .map(|(v, ty)| {
                let s = v.as_str().ok_or_else(|| bad(KEY_TOKENS, "token is not text"))?;
                Ok(match ty {
                    TokenType::Byte => vec![parse_byte_token(s)
                        .ok_or_else(|| bad(KEY_TOKENS, &format!("bad byte token {s:?}")))?],
                    _ => s.as_bytes().to_vec(),
                })
            })
            .collect::<Result<Vec<_>, TokenizerError>>()?;
        Self::new(tokens, scores, types, id(c, KEY_BOS)?, id(c, KEY_EOS)?)
    }

    /// Writes this vocabulary into `tokenizer.*` metadata.
    pub fn write_metadata(&self, c: &mut ModelContainer) {
        let texts = self.tokens.iter().zip(&self.types).map(|(t, ty)| match ty {
            TokenType::Byte => byte_token_text(t[0]),
            _ => String::from_utf8_lossy(t).into_owned(),
        });
        c.set(KEY_TOKENS, Value::strings(texts));
        c.set(KEY_SCORES, Value::f32s(self.scores.iter().copied()));
        c.set(KEY_TYPES, Value::u32s(self.types.iter().map(|t| t.tag())));
        c.set(KEY_BOS, Value::U32(self.bos_id));
        c.set(KEY_EOS, Value::U32(self.eos_id));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_type(&self, id: TokenId) -> Option<TokenType> {
        self.types.get(id as usize).copied()
    }

    pub fn score(&self, id: TokenId) -> Option<f32> {
        self.scores.get(id as usize).copied()
    }

    /// Tokenizes `text`. Never fails: any byte without a merge keeps its byte token.
    pub fn encode(&self, text: &str, add_bos: bool) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() + 1);
        if add_bos {
            out.push(self.bos_id);
        }
        let bytes = text.as_bytes();
        // (id, start, len) spans over `bytes`
        let mut pieces: Vec<(TokenId, usize, usize)> = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| (self.byte_ids[b as usize], i, 1))
            .collect();
        loop {
            let mut best: Option<(usize, TokenId, f32)> = None;
            for (i, pair) in pieces.windows(2).enumerate() {
                let (start, len) = (pair[0].1, pair[0].2 + pair[1].2);
                if let Some(&(id, score)) = self.merges.get(&bytes[start..start + len]) {
                    if best.is_none_or(|(_, _, s)| score > s) {
                        best = Some((i, id, score));
                    }
                }
            }
            let Some((i, id, _)) = best else { break };
            pieces[i] = (id, pieces[i].1, pieces[i].2 + pieces[i + 1].2);
            pieces.remove(i + 1);
        }
        out.extend(pieces.into_iter().map(|(id, _, _)| id));
        out
    }

    /// Concatenates token bytes, dropping control tokens, and converts to text
    /// with replacement characters for invalid UTF-8.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(self.piece(id)?);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Raw bytes contributed by `id` to decoded output (empty for control tokens).
    pub fn piece(&self, id: TokenId) -> Result<&[u8], TokenizerError> {
        match self.types.get(id as usize) {
            None => Err(TokenizerError::IdOutOfRange {
                id,
                size: self.tokens.len(),
            }),
            Some(TokenType::Control) => Ok(&[]),
            Some(_) => Ok(&self.tokens[id as usize]),
        }
    }
}

/// Incremental decoder that holds back incomplete UTF-8 sequences so a
/// multi-byte character split across tokens is emitted once, whole.
#[derive(Debug, Default, Clone)]
pub struct StreamDecoder {
    pending: Vec<u8>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one token and returns the text that became complete.
    pub fn push(&mut self, vocab: &Vocabulary, id: TokenId) -> Result<String, TokenizerError> {
        self.pending.extend_from_slice(vocab.piece(id)?);
        Ok(self.drain_complete())
    }

    fn drain_complete(&mut self) -> String {
        let mut out = String::new();
        let mut rest: &[u8] = &self.pending;
        loop {
            match std::str::from_utf8(rest) {
                Ok(s) => {
                    out.push_str(s);
                    rest = &[];
                    break;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(std::str::from_utf8(&rest[..valid]).unwrap());
                    match e.error_len() {
                        // incomplete sequence at the end: wait for more bytes
                        None => {
                            rest = &rest[valid..];
                            break;
                        }
                        Some(n) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            rest = &rest[valid + n..];
                        }
                    }
                }
            }
        }
        self.pending = rest.to_vec();
        out
    }

    /// Flushes held-back bytes, replacing an incomplete tail.
    pub fn finish(&mut self) -> String {
        let s = String::from_utf8_lossy(&self.pending).into_owned();
        self.pending.clear();
        s
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }
}
