//! Causal language-model backends.
//!
//! A backend must accept arbitrary segments, not only document prefixes:
//! row `i` of [`LanguageModel::evaluate_segment`] is the next-token
//! log-distribution given exactly the first `i` tokens of the segment.

mod http;
mod ngram;
mod trigger;

pub use http::{HttpBackend, HttpConfig, DEFAULT_HTTP_TIMEOUT_MS};
pub use ngram::{ngram_train, NGramModel};
pub use trigger::TriggerModel;

use thiserror::Error;

use crate::types::{TokenId, Vocab};

/// Segment limit reported by the analytic backends.
pub const ANALYTIC_MAX_SEGMENT_LEN: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("segment of length {len} exceeds the backend limit of {max}")]
    SegmentTooLong { len: usize, max: usize },
    #[error("empty segment")]
    EmptySegment,
    #[error("token id {id} at segment offset {offset} is outside the vocabulary of size {vocab_size}")]
    UnknownToken {
        offset: usize,
        id: TokenId,
        vocab_size: usize,
    },
    #[error("invalid model parameters: {0}")]
    InvalidModel(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation in segment {segment}{}: {message}", row.map(|r| format!(", row {r}")).unwrap_or_default())]
    Protocol {
        segment: usize,
        row: Option<usize>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendDescriptor {
    pub name: String,
    pub vocab: Vocab,
    pub max_segment_len: usize,
}

/// `L` log-probability rows over the vocabulary, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRows {
    vocab_size: usize,
    data: Vec<f64>,
}

impl SegmentRows {
    pub fn from_flat(vocab_size: usize, data: Vec<f64>) -> Self {
        assert!(vocab_size > 0 && data.len().is_multiple_of(vocab_size));
        Self { vocab_size, data }
    }

    pub fn with_capacity(vocab_size: usize, rows: usize) -> Self {
        Self {
            vocab_size,
            data: Vec::with_capacity(rows * vocab_size),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.vocab_size);
        self.data.extend_from_slice(row);
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.vocab_size
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row for context length `i + 1`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn last(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.row(self.len() - 1))
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.vocab_size)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

pub trait LanguageModel: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn evaluate_segment(&self, segment: &[TokenId]) -> Result<SegmentRows, BackendError>;

    fn evaluate_batch(&self, segments: &[&[TokenId]]) -> Result<Vec<SegmentRows>, BackendError> {
        segments.iter().map(|s| self.evaluate_segment(s)).collect()
    }

    /// Next-token log-distribution after the whole `context`. Must equal the
    /// last row of `evaluate_segment(context)`.
    fn evaluate_last(&self, context: &[TokenId]) -> Result<Vec<f64>, BackendError> {
        let rows = self.evaluate_segment(context)?;
        rows.last().map(<[f64]>::to_vec).ok_or(BackendError::EmptySegment)
    }
}

/// `p(x_{n+1} | context)` by one direct evaluation of the context alone.
/// This is the brute-force reference for every cell of a probe run.
pub fn direct_reduced_probability(backend: &dyn LanguageModel, context: &[TokenId]) -> Result<Vec<f64>, BackendError> {
    check_segment(backend.descriptor(), context)?;
    backend.evaluate_last(context)
}

pub(crate) fn check_segment(desc: &BackendDescriptor, segment: &[TokenId]) -> Result<(), BackendError> {
    if segment.is_empty() {
        return Err(BackendError::EmptySegment);
    }
    if segment.len() > desc.max_segment_len {
        return Err(BackendError::SegmentTooLong {
            len: segment.len(),
            max: desc.max_segment_len,
        });
    }
    let v = desc.vocab.size();
    if let Some((offset, &id)) = segment.iter().enumerate().find(|(_, &id)| id as usize >= v) {
        return Err(BackendError::UnknownToken {
            offset,
            id,
            vocab_size: v,
        });
    }
    Ok(())
}

/// `log(sum(exp(row)))`, stable for large magnitudes.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
