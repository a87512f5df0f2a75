//! Fixtures shared by the benchmarks.

use ctxprobe_core::backends::{ngram_train, NGramModel};
use ctxprobe_core::{TokenId, TokenizedDocument, Vocab};

pub fn vocab(size: usize) -> Vocab {
    Vocab::new((0..size).map(|i| format!("t{i}")).collect()).expect("distinct tokens")
}

/// Deterministic pseudo-random token stream (xorshift).
pub fn tokens(len: usize, vocab_size: usize, seed: u64) -> Vec<TokenId> {
    let mut s = seed | 1;
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % vocab_size as u64) as TokenId
        })
        .collect()
}

pub fn ngram_fixture(doc_len: usize, vocab_size: usize, order: usize) -> (NGramModel, TokenizedDocument) {
    let train = tokens(4 * doc_len, vocab_size, 7);
    let model = ngram_train(&[train], vocab(vocab_size), order, 0.1).expect("valid model");
    (model, TokenizedDocument::new("bench", tokens(doc_len, vocab_size, 11)))
}
