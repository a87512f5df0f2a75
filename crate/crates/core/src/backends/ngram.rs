use std::collections::HashMap;

use super::{check_segment, BackendDescriptor, BackendError, LanguageModel, SegmentRows, ANALYTIC_MAX_SEGMENT_LEN};
use crate::types::{TokenId, Vocab};

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

/// Order-`m` n-gram model with additive smoothing:
/// `p(w | h) = (count(h, w) + alpha) / (count(h, .) + alpha * |V|)`,
/// where `h` is the last `min(m - 1, available)` context tokens.
#[derive(Debug, Clone)]
pub struct NGramModel {
    desc: BackendDescriptor,
    order: usize,
    alpha: f64,
    /// `counts[k]` maps length-`k` histories to next-token counts.
    counts: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

/// Count all `(history, next)` occurrences with history lengths
/// `0..order`. Histories never cross document boundaries.
pub fn ngram_train(
    corpus: &[Vec<TokenId>],
    vocab: Vocab,
    order: usize,
    alpha: f64,
) -> Result<NGramModel, BackendError> {
    if order < 1 {
        return Err(BackendError::InvalidModel("n-gram order must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(BackendError::InvalidModel(format!(
            "smoothing constant must be positive, got {alpha}"
        )));
    }
    if corpus.iter().all(|d| d.is_empty()) {
        return Err(BackendError::EmptyCorpus);
    }
    let v = vocab.size();
    let mut counts: Vec<HashMap<Vec<TokenId>, ContextCounts>> = vec![HashMap::new(); order];
    for doc in corpus {
        if let Some(&id) = doc.iter().find(|&&id| id as usize >= v) {
            return Err(BackendError::UnknownToken {
                offset: 0,
                id,
                vocab_size: v,
            });
        }
        for (j, &next) in doc.iter().enumerate() {
            for (k, table) in counts.iter_mut().enumerate().take(j.min(order - 1) + 1) {
                let entry = table.entry(doc[j - k..j].to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(next).or_default() += 1;
            }
        }
    }
    Ok(NGramModel {
        desc: BackendDescriptor {
            name: format!("ngram:{order}:{alpha}"),
            vocab,
            max_segment_len: ANALYTIC_MAX_SEGMENT_LEN,
        },
        order,
        alpha,
        counts,
    })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `count(history, next)`; the history length selects the table.
    pub fn count(&self, history: &[TokenId], next: TokenId) -> u64 {
        self.counts
            .get(history.len())
            .and_then(|t| t.get(history))
            .and_then(|c| c.next.get(&next).copied())
            .unwrap_or(0)
    }

    pub fn history_total(&self, history: &[TokenId]) -> u64 {
        self.counts
            .get(history.len())
            .and_then(|t| t.get(history))
            .map_or(0, |c| c.total)
    }

    /// Log-distribution after `context`, using only its last `order - 1` tokens.
    pub fn conditional(&self, context: &[TokenId]) -> Vec<f64> {
        let k = context.len().min(self.order - 1);
        let history = &context[context.len() - k..];
        let v = self.desc.vocab.size();
        let entry = self.counts[k].get(history);
        let total = entry.map_or(0, |e| e.total) as f64;
        let log_denom = (total + self.alpha * v as f64).ln();
        let smoothed = self.alpha.ln() - log_denom;
        let mut row = vec![smoothed; v];
        if let Some(e) = entry {
            for (&w, &cnt) in &e.next {
                row[w as usize] = (cnt as f64 + self.alpha).ln() - log_denom;
            }
        }
        row
    }
}

impl LanguageModel for NGramModel {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn evaluate_segment(&self, segment: &[TokenId]) -> Result<SegmentRows, BackendError> {
        check_segment(&self.desc, segment)?;
        let mut rows = SegmentRows::with_capacity(self.desc.vocab.size(), segment.len());
        for i in 1..=segment.len() {
            rows.push(&self.conditional(&segment[..i]));
        }
        Ok(rows)
    }

    fn evaluate_last(&self, context: &[TokenId]) -> Result<Vec<f64>, BackendError> {
        check_segment(&self.desc, context)?;
        Ok(self.conditional(context))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::direct_reduced_probability;

    fn ab() -> Vocab {
        Vocab::new(vec!["a".into(), "b".into()]).unwrap()
    }

    fn ababa() -> Vec<Vec<TokenId>> {
        vec![ab().encode_words("a b a b a").unwrap()]
    }

    fn probs(row: &[f64]) -> Vec<f64> {
        row.iter().map(|x| x.exp()).collect()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn bigram_hand_counts() {
        let m = ngram_train(&ababa(), ab(), 2, 1.0).unwrap();
        assert_eq!(m.count(&[0], 1), 2);
        assert_eq!(m.count(&[1], 0), 2);
        assert_eq!(m.count(&[0], 0), 0);
        let rows = m.evaluate_segment(&[0]).unwrap();
        assert!(close(&probs(rows.row(0)), &[0.25, 0.75]));
        let rows = m.evaluate_segment(&[1, 0]).unwrap();
        assert_eq!(rows.row(1), m.evaluate_segment(&[0]).unwrap().row(0));
        assert!(close(&probs(rows.row(0)), &[0.75, 0.25]));
    }

    #[test]
    fn unigram_degenerate_case() {
        let m = ngram_train(&ababa(), ab(), 1, 1.0).unwrap();
        let p = probs(&m.conditional(&[1, 1, 0]));
        assert!(close(&p, &[4.0 / 7.0, 3.0 / 7.0]));
    }

    #[test]
    fn single_token_corpus_is_uniform() {
        let m = ngram_train(&[vec![0]], ab(), 2, 1.0).unwrap();
        for ctx in [&[0][..], &[1], &[0, 1]] {
            assert!(close(&probs(&m.conditional(ctx)), &[0.5, 0.5]));
        }
    }

    #[test]
    fn histories_do_not_cross_documents() {
        // "a" | "b": no a->b pair exists across the boundary
        let m = ngram_train(&[vec![0], vec![1]], ab(), 2, 1.0).unwrap();
        assert_eq!(m.count(&[0], 1), 0);
        assert_eq!(m.history_total(&[]), 2);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(ngram_train(&[], ab(), 2, 1.0), Err(BackendError::EmptyCorpus)));
        assert!(matches!(
            ngram_train(&[vec![]], ab(), 2, 1.0),
            Err(BackendError::EmptyCorpus)
        ));
        assert!(ngram_train(&ababa(), ab(), 0, 1.0).is_err());
        assert!(ngram_train(&ababa(), ab(), 2, 0.0).is_err());
        assert!(ngram_train(&[vec![0, 5]], ab(), 2, 1.0).is_err());
    }

    #[test]
    fn order_truncation_of_direct_probability() {
        let m = ngram_train(&ababa(), ab(), 2, 1.0).unwrap();
        let bba = direct_reduced_probability(&m, &[1, 1, 0]).unwrap();
        assert_eq!(bba, m.evaluate_segment(&[0]).unwrap().row(0));
    }

    #[test]
    fn segment_validation() {
        let m = ngram_train(&ababa(), ab(), 2, 1.0).unwrap();
        assert!(matches!(m.evaluate_segment(&[]), Err(BackendError::EmptySegment)));
        assert!(matches!(
            m.evaluate_segment(&[0, 2]),
            Err(BackendError::UnknownToken { offset: 1, id: 2, .. })
        ));
    }
}
