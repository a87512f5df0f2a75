//! Client for an external model server.
//!
//! Wire protocol, all floats natural-log probabilities:
//!
//! * `POST /v1/evaluate` `{"segments": [[id, ...], ...]}` ->
//!   `{"logprobs": [[[f; |V|]; L_i]; batch]}`
//! * `GET /v1/vocab` -> `{"tokens": [...], "max_segment_len": int?}`
//! * `POST /v1/tokenize` `{"text": s}` -> `{"ids": [...], "spans": [[start, end], ...]}`
//!
//! Spans on the wire count Unicode scalar values; they are converted to byte
//! offsets on receipt. `NaN`/`Infinity` literals as emitted by common JSON
//! encoders are tolerated by the parser so that they can be reported as
//! protocol violations; `-Infinity` is a legal zero-probability entry.

use std::borrow::Cow;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_segment, log_sum_exp, BackendDescriptor, BackendError, LanguageModel, SegmentRows};
use crate::corpus::{CorpusError, Tokenization, Tokenizer};
use crate::types::{TokenId, Vocab};

pub const DEFAULT_HTTP_TIMEOUT_MS: u64 = 600_000;
/// Rows whose exp-sum misses 1 by at least this much are logged.
pub const RENORMALIZE_WARN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    /// Used when the server does not advertise a limit.
    pub max_segment_len: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_millis(DEFAULT_HTTP_TIMEOUT_MS),
            max_segment_len: 1024,
        }
    }
}

#[derive(Serialize)]
struct EvaluateRequest<'a> {
    segments: &'a [&'a [TokenId]],
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireFloat {
    Num(f64),
    Text(String),
    Null(()),
}

impl WireFloat {
    fn value(&self) -> f64 {
        match self {
            WireFloat::Num(x) => *x,
            WireFloat::Text(s) if s == "-Infinity" => f64::NEG_INFINITY,
            WireFloat::Text(s) if s == "Infinity" => f64::INFINITY,
            _ => f64::NAN,
        }
    }
}

#[derive(Deserialize)]
struct EvaluateResponse {
    logprobs: Vec<Vec<Vec<WireFloat>>>,
}

#[derive(Deserialize)]
struct VocabResponse {
    tokens: Vec<String>,
    #[serde(default)]
    max_segment_len: Option<usize>,
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    ids: Vec<TokenId>,
    spans: Vec<[usize; 2]>,
}

#[derive(Debug)]
pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
    desc: BackendDescriptor,
    renormalized: AtomicUsize,
}

fn transport(e: impl std::fmt::Display) -> BackendError {
    BackendError::Transport(e.to_string())
}

/// Quote bare `NaN`/`Infinity`/`-Infinity` tokens outside of strings so the
/// response parses as JSON.
fn quote_non_finite(body: &str) -> Cow<'_, str> {
    if !(body.contains("NaN") || body.contains("Infinity")) {
        return body.into();
    }
    let mut out = String::with_capacity(body.len() + 16);
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = body;
    while let Some(ch) = rest.chars().next() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
        } else if ch == '"' {
            in_string = true;
        } else if let Some(tok) = ["-Infinity", "Infinity", "NaN"].iter().find(|t| rest.starts_with(**t)) {
            out.push('"');
            out.push_str(tok);
            out.push('"');
            rest = &rest[tok.len()..];
            continue;
        }
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out.into()
}

impl HttpBackend {
    /// Connect and fetch the vocabulary.
    pub fn connect(base_url: &str, config: HttpConfig) -> Result<Self, BackendError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        let base_url = base_url.trim_end_matches('/').to_string();
        let body = agent
            .get(format!("{base_url}/v1/vocab"))
            .call()
            .map_err(transport)?
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(transport)?;
        let vocab: VocabResponse = serde_json::from_str(&body).map_err(|e| BackendError::Protocol {
            segment: 0,
            row: None,
            message: format!("malformed /v1/vocab response: {e}"),
        })?;
        let max_segment_len = vocab.max_segment_len.unwrap_or(config.max_segment_len);
        let vocab =
            Vocab::new(vocab.tokens).map_err(|e| BackendError::InvalidModel(format!("server vocabulary: {e}")))?;
        log::debug!("connected to {base_url}, |V|={}", vocab.size());
        Ok(Self {
            desc: BackendDescriptor {
                name: format!("http:{base_url}"),
                vocab,
                max_segment_len,
            },
            base_url,
            agent,
            renormalized: AtomicUsize::new(0),
        })
    }

    /// Rows whose normalization was off by at least
    /// [`RENORMALIZE_WARN_TOLERANCE`].
    pub fn renormalized_rows(&self) -> usize {
        self.renormalized.load(Ordering::Relaxed)
    }

    fn post(&self, path: &str, body: &impl Serialize) -> Result<String, BackendError> {
        self.agent
            .post(format!("{}{path}", self.base_url))
            .send_json(body)
            .map_err(transport)?
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_string()
            .map_err(transport)
    }

    /// Check shapes and values of one batch response; normalize every row.
    fn decode(&self, segments: &[&[TokenId]], body: &str) -> Result<Vec<SegmentRows>, BackendError> {
        let resp: EvaluateResponse =
            serde_json::from_str(&quote_non_finite(body)).map_err(|e| BackendError::Protocol {
                segment: 0,
                row: None,
                message: format!("malformed /v1/evaluate response: {e}"),
            })?;
        if resp.logprobs.len() != segments.len() {
            return Err(BackendError::Protocol {
                segment: 0,
                row: None,
                message: format!("{} segments sent, {} returned", segments.len(), resp.logprobs.len()),
            });
        }
        let v = self.desc.vocab.size();
        let mut out = Vec::with_capacity(segments.len());
        for (si, (seg, rows)) in segments.iter().zip(resp.logprobs).enumerate() {
            if rows.len() != seg.len() {
                return Err(BackendError::Protocol {
                    segment: si,
                    row: None,
                    message: format!("segment of length {} answered with {} rows", seg.len(), rows.len()),
                });
            }
            let mut acc = SegmentRows::with_capacity(v, seg.len());
            let mut buf = vec![0.0; v];
            for (ri, row) in rows.iter().enumerate() {
                let violation = |message: String| BackendError::Protocol {
                    segment: si,
                    row: Some(ri),
                    message,
                };
                if row.len() != v {
                    return Err(violation(format!(
                        "row has {} entries, vocabulary has {v} (full distributions are required)",
                        row.len()
                    )));
                }
                for (b, x) in buf.iter_mut().zip(row) {
                    *b = x.value();
                    if b.is_nan() || *b == f64::INFINITY {
                        return Err(violation(format!("non-finite log-probability {b}")));
                    }
                }
                let lse = log_sum_exp(&buf);
                if !lse.is_finite() {
                    return Err(violation("row assigns zero probability everywhere".into()));
                }
                let deviation = (lse.exp() - 1.0).abs();
                if deviation >= RENORMALIZE_WARN_TOLERANCE * (1.0 - 1e-9) {
                    self.renormalized.fetch_add(1, Ordering::Relaxed);
                    log::warn!("segment {si}, row {ri}: exp-sum off by {deviation:.3e}, renormalizing");
                }
                if lse != 0.0 {
                    buf.iter_mut().for_each(|x| *x -= lse);
                }
                acc.push(&buf);
            }
            out.push(acc);
        }
        Ok(out)
    }
}

impl LanguageModel for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn evaluate_segment(&self, segment: &[TokenId]) -> Result<SegmentRows, BackendError> {
        Ok(self.evaluate_batch(&[segment])?.remove(0))
    }

    fn evaluate_batch(&self, segments: &[&[TokenId]]) -> Result<Vec<SegmentRows>, BackendError> {
        for (i, s) in segments.iter().enumerate() {
            check_segment(&self.desc, s).map_err(|e| BackendError::Protocol {
                segment: i,
                row: None,
                message: format!("refusing to send: {e}"),
            })?;
        }
        let body = self.post("/v1/evaluate", &EvaluateRequest { segments })?;
        self.decode(segments, &body)
    }
}

impl Tokenizer for HttpBackend {
    fn vocab(&self) -> &Vocab {
        &self.desc.vocab
    }

    fn tokenize(&self, text: &str) -> Result<Tokenization, CorpusError> {
        let body = self
            .post("/v1/tokenize", &TokenizeRequest { text })
            .map_err(|e| CorpusError::Tokenizer(e.to_string()))?;
        let resp: TokenizeResponse = serde_json::from_str(&body)
            .map_err(|e| CorpusError::Tokenizer(format!("malformed /v1/tokenize response: {e}")))?;
        if resp.ids.len() != resp.spans.len() {
            return Err(CorpusError::Tokenizer(format!(
                "{} ids but {} spans",
                resp.ids.len(),
                resp.spans.len()
            )));
        }
        // char offset -> byte offset
        let mut byte_at: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        byte_at.push(text.len());
        let spans = resp
            .spans
            .iter()
            .map(|&[s, e]| match (byte_at.get(s), byte_at.get(e)) {
                (Some(&bs), Some(&be)) if s <= e => Ok(bs..be),
                _ => Err(CorpusError::SpanMismatch(format!(
                    "token span [{s}, {e}) lies outside a text of {} characters",
                    byte_at.len() - 1
                ))),
            })
            .collect::<Result<_, _>>()?;
        Ok(Tokenization { ids: resp.ids, spans })
    }
}
