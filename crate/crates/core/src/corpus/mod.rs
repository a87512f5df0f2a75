//! Treebank ingestion: CoNLL-U parsing, document concatenation,
//! retokenization and word-to-subword POS mapping.

mod conllu;
mod pos;
mod tokenize;

pub use conllu::{load_conllu, parse_conllu, ConlluDocument, ConlluWord};
pub use pos::{map_pos_tags, POS_NONE};
pub use tokenize::{detokenize, Tokenization, Tokenizer, WordTokenizer, UNK_TOKEN};

use std::ops::Range;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::TokenizedDocument;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("no words found in the input")]
    EmptyInput,
    #[error("document {0:?} is empty")]
    EmptyDocument(String),
    #[error("tokenizer failure: {0}")]
    Tokenizer(String),
    #[error("span mismatch: {0}")]
    SpanMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A syntactic word placed in the concatenated document text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedWord {
    pub surface: String,
    pub upos: String,
    pub doc_id: String,
    /// Byte range in the document text.
    pub char_span: Range<usize>,
}

/// How word surfaces are glued into document text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinRule {
    /// Honor `SpaceAfter=No` from the MISC column.
    pub honor_space_after: bool,
    /// Never put a space before `. , ; : ! ? ) ]`.
    pub no_space_before_punct: bool,
}

impl Default for JoinRule {
    fn default() -> Self {
        Self {
            honor_space_after: true,
            no_space_before_punct: false,
        }
    }
}

fn is_closing_punct(s: &str) -> bool {
    matches!(s, "." | "," | ";" | ":" | "!" | "?" | ")" | "]")
}

/// Join words with single spaces (subject to `rule`) and record each word's
/// span in the result.
pub fn concatenate_words(doc_id: &str, words: &[ConlluWord], rule: JoinRule) -> (String, Vec<AnnotatedWord>) {
    let mut text = String::new();
    let mut out = Vec::with_capacity(words.len());
    let mut pending_space = false;
    for w in words {
        if pending_space && !(rule.no_space_before_punct && is_closing_punct(&w.form)) {
            text.push(' ');
        }
        let start = text.len();
        text.push_str(&w.form);
        out.push(AnnotatedWord {
            surface: w.form.clone(),
            upos: w.upos.clone(),
            doc_id: doc_id.to_string(),
            char_span: start..text.len(),
        });
        pending_space = !rule.honor_space_after || w.space_after;
    }
    (text, out)
}

/// Concatenate a document's words and tokenize the resulting text.
pub fn concatenate_and_retokenize(
    doc_id: &str,
    words: &[ConlluWord],
    tokenizer: &dyn Tokenizer,
    rule: JoinRule,
) -> Result<(TokenizedDocument, Vec<AnnotatedWord>), CorpusError> {
    if words.is_empty() {
        return Err(CorpusError::EmptyDocument(doc_id.to_string()));
    }
    let (text, annotated) = concatenate_words(doc_id, words, rule);
    let doc = tokenize_text(doc_id, text, tokenizer)?;
    Ok((doc, annotated))
}

/// Tokenize raw text into a document carrying spans and text.
pub fn tokenize_text(doc_id: &str, text: String, tokenizer: &dyn Tokenizer) -> Result<TokenizedDocument, CorpusError> {
    let tok = tokenizer.tokenize(&text)?;
    if tok.ids.is_empty() {
        return Err(CorpusError::EmptyDocument(doc_id.to_string()));
    }
    if let Some(bad) = tok.spans.iter().find(|s| s.end > text.len() || s.start > s.end) {
        return Err(CorpusError::SpanMismatch(format!(
            "token span {bad:?} lies outside a text of {} bytes",
            text.len()
        )));
    }
    Ok(TokenizedDocument {
        doc_id: doc_id.to_string(),
        token_ids: tok.ids,
        pos_tags: None,
        source_spans: Some(tok.spans),
        text: Some(text),
    })
}

/// The full ingestion path for one treebank document.
pub fn ingest_document(
    doc: &ConlluDocument,
    tokenizer: &dyn Tokenizer,
    rule: JoinRule,
) -> Result<TokenizedDocument, CorpusError> {
    let (tokenized, words) = concatenate_and_retokenize(&doc.doc_id, &doc.words, tokenizer, rule)?;
    map_pos_tags(tokenized, &words)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(form: &str, upos: &str) -> ConlluWord {
        ConlluWord {
            form: form.into(),
            upos: upos.into(),
            space_after: true,
        }
    }

    #[test]
    fn whitespace_spans() {
        let words = [w("the", "DET"), w("birds", "NOUN")];
        let tok = WordTokenizer::fit(["the birds"], None);
        let (doc, annotated) = concatenate_and_retokenize("d", &words, &tok, JoinRule::default()).unwrap();
        assert_eq!(doc.len(), 2);
        assert_eq!(doc.source_spans, Some(vec![0..3, 4..9]));
        assert_eq!(annotated[1].char_span, 4..9);
        assert_eq!(doc.text.as_deref(), Some("the birds"));
    }

    #[test]
    fn subwords_lie_inside_word() {
        let words = [w("the", "DET"), w("birds", "NOUN")];
        let tok = WordTokenizer::fit(["the birds"], Some(4));
        let (doc, annotated) = concatenate_and_retokenize("d", &words, &tok, JoinRule::default()).unwrap();
        let spans = doc.source_spans.unwrap();
        assert_eq!(spans, vec![0..3, 4..8, 8..9]);
        for s in &spans[1..] {
            assert!(annotated[1].char_span.start <= s.start && s.end <= annotated[1].char_span.end);
        }
    }

    #[test]
    fn empty_document_is_an_error() {
        let tok = WordTokenizer::fit(["x y"], None);
        assert!(matches!(
            concatenate_and_retokenize("d", &[], &tok, JoinRule::default()),
            Err(CorpusError::EmptyDocument(_))
        ));
    }

    #[test]
    fn join_rules() {
        let mut hi = w("Hi", "INTJ");
        hi.space_after = false;
        let words = [hi, w(",", "PUNCT"), w("you", "PRON"), w(".", "PUNCT")];
        let (t, _) = concatenate_words("d", &words, JoinRule::default());
        assert_eq!(t, "Hi, you .");
        let (t, _) = concatenate_words(
            "d",
            &words,
            JoinRule {
                honor_space_after: true,
                no_space_before_punct: true,
            },
        );
        assert_eq!(t, "Hi, you.");
        let (t, _) = concatenate_words(
            "d",
            &words,
            JoinRule {
                honor_space_after: false,
                no_space_before_punct: false,
            },
        );
        assert_eq!(t, "Hi , you .");
    }
}
