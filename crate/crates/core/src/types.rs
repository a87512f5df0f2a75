//! Domain types shared by every stage of the pipeline.
//!
//! Positions follow the 1-based convention used throughout the crate: a
//! document is `x_1..x_N`, the target of position `n` is `x_{n+1}`, and a
//! context of length `c` for that target is `x_{n-c+1}..x_n`.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense token id into a [`Vocab`].
pub type TokenId = u32;

/// Default maximum context length.
pub const DEFAULT_C_MAX: usize = 1023;
/// Default number of segments per backend call.
pub const DEFAULT_BATCH_SIZE: usize = 16;
/// Default number of top predictions kept per retained context length.
pub const DEFAULT_TOP_K_EXPORT: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("vocabulary needs at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("duplicate vocabulary token {0:?}")]
    DuplicateToken(String),
    #[error("document {doc_id:?} has {len} tokens, at least 2 are required")]
    DocumentTooShort { doc_id: String, len: usize },
    #[error("document {doc_id:?}: token id {id} at index {index} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        doc_id: String,
        index: usize,
        id: TokenId,
        vocab_size: usize,
    },
    #[error("document {doc_id:?}: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        doc_id: String,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
}

/// Ordered token-string table with dense ids `0..|V|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, TypeError> {
        if tokens.len() < 2 {
            return Err(TypeError::VocabTooSmall(tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(TypeError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Map a whitespace-separated string to ids. Handy in tests.
    pub fn encode_words(&self, text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            tokens: &'a [String],
        }
        Repr { tokens: &self.tokens }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            tokens: Vec<String>,
        }
        let r = Repr::deserialize(d)?;
        Vocab::new(r.tokens).map_err(serde::de::Error::custom)
    }
}

/// One document in token-id space, optionally POS-annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedDocument {
    pub doc_id: String,
    pub token_ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_spans: Option<Vec<Range<usize>>>,
    /// Text the spans index into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl TokenizedDocument {
    pub fn new(doc_id: impl Into<String>, token_ids: Vec<TokenId>) -> Self {
        Self {
            doc_id: doc_id.into(),
            token_ids,
            pos_tags: None,
            source_spans: None,
            text: None,
        }
    }

    /// Document length `N`.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Token `x_i` (1-based).
    pub fn token(&self, i: usize) -> TokenId {
        self.token_ids[i - 1]
    }

    /// Target token `x_{n+1}` of position `n`.
    pub fn target(&self, n: usize) -> TokenId {
        self.token_ids[n]
    }

    /// The context `x_{n-c+1}..x_n` as a slice.
    pub fn context(&self, n: usize, c: usize) -> &[TokenId] {
        &self.token_ids[n - c..n]
    }

    /// POS tag of `x_i` (1-based), if the document is tagged.
    pub fn pos(&self, i: usize) -> Option<&str> {
        self.pos_tags.as_ref().map(|t| t[i - 1].as_str())
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), TypeError> {
        if self.token_ids.len() < 2 {
            return Err(TypeError::DocumentTooShort {
                doc_id: self.doc_id.clone(),
                len: self.token_ids.len(),
            });
        }
        if let Some((index, &id)) = self
            .token_ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= vocab_size)
        {
            return Err(TypeError::TokenOutOfRange {
                doc_id: self.doc_id.clone(),
                index,
                id,
                vocab_size,
            });
        }
        let n = self.token_ids.len();
        if let Some(tags) = &self.pos_tags {
            if tags.len() != n {
                return Err(TypeError::LengthMismatch {
                    doc_id: self.doc_id.clone(),
                    what: "pos_tags",
                    got: tags.len(),
                    expected: n,
                });
            }
        }
        if let Some(spans) = &self.source_spans {
            if spans.len() != n {
                return Err(TypeError::LengthMismatch {
                    doc_id: self.doc_id.clone(),
                    what: "source_spans",
                    got: spans.len(),
                    expected: n,
                });
            }
        }
        Ok(())
    }
}

/// Element type of the stored log-probabilities.
///
/// `F64` is not part of the two codes the probe defaults to; it exists so
/// oracle comparisons can run without any quantization at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreDtype {
    F32,
    F16,
    F64,
}

impl StoreDtype {
    pub fn code(self) -> u32 {
        match self {
            StoreDtype::F32 => 0,
            StoreDtype::F16 => 1,
            StoreDtype::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(StoreDtype::F32),
            1 => Some(StoreDtype::F16),
            2 => Some(StoreDtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            StoreDtype::F32 => 4,
            StoreDtype::F16 => 2,
            StoreDtype::F64 => 8,
        }
    }

    /// Row normalization tolerance guaranteed for this precision.
    pub fn row_tolerance(self) -> f64 {
        match self {
            StoreDtype::F16 => 1e-4,
            StoreDtype::F32 => 1e-6,
            StoreDtype::F64 => 1e-12,
        }
    }
}

impl std::str::FromStr for StoreDtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float32" => Ok(StoreDtype::F32),
            "f16" | "float16" => Ok(StoreDtype::F16),
            "f64" | "float64" => Ok(StoreDtype::F64),
            other => Err(format!("unknown dtype {other:?} (expected f16, f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub c_max: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub store_dtype: StoreDtype,
    pub top_k_export: usize,
    /// Batches evaluated concurrently.
    pub parallelism: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            c_max: DEFAULT_C_MAX,
            stride: 1,
            batch_size: DEFAULT_BATCH_SIZE,
            store_dtype: StoreDtype::F16,
            top_k_export: DEFAULT_TOP_K_EXPORT,
            parallelism: 1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), TypeError> {
        let bad = |m: String| Err(TypeError::InvalidConfig(m));
        if self.c_max < 1 {
            return bad("c_max must be at least 1".into());
        }
        if self.stride < 1 || self.stride > self.c_max {
            return bad(format!("stride must lie in 1..={}, got {}", self.c_max, self.stride));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.top_k_export < 1 {
            return bad("top_k_export must be at least 1".into());
        }
        if self.parallelism < 1 {
            return bad("parallelism must be at least 1".into());
        }
        Ok(())
    }
}
