use std::ops::Range;

use super::CorpusError;
use crate::types::{TokenId, Vocab};

pub const UNK_TOKEN: &str = "<unk>";

/// Token ids with byte spans into the tokenized text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenization {
    pub ids: Vec<TokenId>,
    pub spans: Vec<Range<usize>>,
}

pub trait Tokenizer {
    fn vocab(&self) -> &Vocab;
    fn tokenize(&self, text: &str) -> Result<Tokenization, CorpusError>;
}

/// Whitespace + punctuation tokenizer for the analytic backends.
///
/// Alphanumeric runs form words, every other non-space character is a token
/// on its own. With `max_piece_chars` set, longer words are cut into pieces
/// of at most that many characters, which gives subword behaviour.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab: Vocab,
    max_piece_chars: Option<usize>,
}

fn pieces(text: &str, max_piece_chars: Option<usize>) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut Vec<Range<usize>>, start: usize, end: usize| {
        let Some(max) = max_piece_chars else {
            out.push(start..end);
            return;
        };
        let mut piece_start = start;
        for (count, (off, _)) in text[start..end].char_indices().enumerate() {
            if count > 0 && count % max == 0 {
                out.push(piece_start..start + off);
                piece_start = start + off;
            }
        }
        out.push(piece_start..end);
    };
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            flush(&mut out, s, i);
        }
        if !ch.is_whitespace() {
            out.push(i..i + ch.len_utf8());
        }
    }
    if let Some(s) = word_start {
        flush(&mut out, s, text.len());
    }
    out
}

impl WordTokenizer {
    pub fn new(vocab: Vocab, max_piece_chars: Option<usize>) -> Self {
        Self {
            vocab,
            max_piece_chars: max_piece_chars.filter(|&m| m > 0),
        }
    }

    /// Build the vocabulary from the pieces of `texts` in first-seen order,
    /// with [`UNK_TOKEN`] at id 0.
    pub fn fit<I, S>(texts: I, max_piece_chars: Option<usize>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let max_piece_chars = max_piece_chars.filter(|&m| m > 0);
        let mut tokens = vec![UNK_TOKEN.to_string()];
        let mut seen = std::collections::HashSet::new();
        seen.insert(UNK_TOKEN.to_string());
        for t in texts {
            let t = t.as_ref();
            for r in pieces(t, max_piece_chars) {
                if seen.insert(t[r.clone()].to_string()) {
                    tokens.push(t[r].to_string());
                }
            }
        }
        if tokens.len() < 2 {
            tokens.push("<pad>".into());
        }
        let vocab = Vocab::new(tokens).expect("tokens are unique by construction");
        Self { vocab, max_piece_chars }
    }

    pub fn max_piece_chars(&self) -> Option<usize> {
        self.max_piece_chars
    }
}

impl Tokenizer for WordTokenizer {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn tokenize(&self, text: &str) -> Result<Tokenization, CorpusError> {
        let spans = pieces(text, self.max_piece_chars);
        let unk = self.vocab.id(UNK_TOKEN);
        let ids = spans
            .iter()
            .map(|r| {
                self.vocab.id(&text[r.clone()]).or(unk).ok_or_else(|| {
                    CorpusError::Tokenizer(format!("piece {:?} is not in the vocabulary", &text[r.clone()]))
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Tokenization { ids, spans })
    }
}

/// Rebuild text from token strings placed at their spans; gaps between
/// spans are filled with spaces.
pub fn detokenize(vocab: &Vocab, ids: &[TokenId], spans: &[Range<usize>]) -> Result<String, CorpusError> {
    let mut out = String::new();
    for (&id, span) in ids.iter().zip(spans) {
        let tok = vocab
            .token(id)
            .ok_or_else(|| CorpusError::Tokenizer(format!("unknown id {id}")))?;
        if span.start < out.len() || tok.len() != span.len() {
            return Err(CorpusError::SpanMismatch(format!(
                "token {tok:?} cannot be placed at {span:?}"
            )));
        }
        out.extend(std::iter::repeat_n(' ', span.start - out.len()));
        out.push_str(tok);
    }
    Ok(out)
}
