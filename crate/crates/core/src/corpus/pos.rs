use super::{AnnotatedWord, CorpusError};
use crate::types::TokenizedDocument;

/// Tag for tokens that overlap no word.
pub const POS_NONE: &str = "NONE";

/// Tag every token with the UPOS of the first word its span overlaps.
///
/// `words` must be ordered with non-overlapping spans, as produced by
/// [`super::concatenate_words`].
pub fn map_pos_tags(mut doc: TokenizedDocument, words: &[AnnotatedWord]) -> Result<TokenizedDocument, CorpusError> {
    let spans = doc
        .source_spans
        .as_ref()
        .ok_or_else(|| CorpusError::SpanMismatch(format!("document {:?} has no token spans", doc.doc_id)))?;
    let text_len = doc.text.as_ref().map(String::len);
    let mut tags = Vec::with_capacity(spans.len());
    for span in spans {
        if text_len.is_some_and(|l| span.end > l) || span.start > span.end {
            return Err(CorpusError::SpanMismatch(format!(
                "token span {span:?} lies outside the document text"
            )));
        }
        // leftmost word ending after the token start is the only candidate
        // for the first overlap
        let i = words.partition_point(|w| w.char_span.end <= span.start);
        let tag = match words.get(i) {
            Some(w) if w.char_span.start < span.end && span.start < span.end => w.upos.clone(),
            _ => POS_NONE.to_string(),
        };
        tags.push(tag);
    }
    doc.pos_tags = Some(tags);
    Ok(doc)
}
