//! Per-cell metrics over a finalized store.
//!
//! * NLL: `-log P[n, c, x_{n+1}]`
//! * KL: `D[n, c] = KL(P[n, c_ref, *] || P[n, c, *])`, where `c_ref` is the
//!   longest covered context (`min(n, c_max)` for stride 1)
//! * Δ-scores: the drop in a metric when context token `x_m` enters the
//!   context, `Δ[n, m] = D[n, n-m] - D[n, n-m+1]`. The immediately preceding
//!   token `x_n` has no score, since removing it leaves an empty context.
//!
//! On strided stores consecutive covered context lengths `c_a < c_b` are
//! `k` apart; the score `D[n, c_a] - D[n, c_b]` is assigned to the leftmost
//! token of the block that enters, `m = n - c_b + 1`.
//!
//! All logarithms are natural.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::log_sum_exp;
use crate::store::{PredictionStore, StoreError};
use crate::types::{TokenId, TokenizedDocument, TypeError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Input(#[from] TypeError),
    #[error("store/document mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Kl,
    Nll,
}

fn check_pair(store: &PredictionStore, doc: &TokenizedDocument) -> Result<(), MetricsError> {
    if store.doc_len() != doc.len() {
        return Err(MetricsError::Mismatch(format!(
            "store covers {} tokens, document {:?} has {}",
            store.doc_len(),
            doc.doc_id,
            doc.len()
        )));
    }
    doc.validate(store.vocab_size())?;
    Ok(())
}

/// `-log P[n, c, x_{n+1}]` in nats.
pub fn nll(store: &PredictionStore, doc: &TokenizedDocument, n: usize, c: usize) -> Result<f64, MetricsError> {
    check_pair(store, doc)?;
    Ok(-store.cell_value(n, c, doc.target(n) as usize)?)
}

fn normalize(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    if lse != 0.0 && lse.is_finite() {
        row.iter_mut().for_each(|x| *x -= lse);
    }
}

/// `KL(p || q)` for log-distributions, summed termwise as
/// `p (d - 1 + e^{-d}) = p log(p/q) - p + q` with `d = log p - log q`. For
/// normalized inputs this is the plain KL sum; every term is nonnegative.
fn kl_log(reference: &[f64], other: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (&lp, &lq) in reference.iter().zip(other) {
        let term = if lp == f64::NEG_INFINITY {
            lq.exp()
        } else if lq == f64::NEG_INFINITY {
            return f64::INFINITY;
        } else {
            let d = lp - lq;
            lp.exp() * (d + (-d).exp_m1())
        };
        // Neumaier summation
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    let kl = sum + comp;
    if (-1e-12..0.0).contains(&kl) {
        0.0
    } else {
        kl
    }
}

struct RowCache {
    reference: Vec<f64>,
    scratch: Vec<f64>,
}

impl RowCache {
    fn new(store: &PredictionStore, n: usize) -> Result<Self, StoreError> {
        let mut reference = store.cell_lookup(n, store.reference_context(n))?;
        normalize(&mut reference);
        Ok(Self {
            reference,
            scratch: vec![0.0; store.vocab_size()],
        })
    }

    fn kl(&mut self, store: &PredictionStore, n: usize, c: usize) -> Result<f64, StoreError> {
        let (_, c) = store.resolve(n, c)?;
        if c == store.reference_context(n) {
            return Ok(0.0);
        }
        store.cell_into(n, c, &mut self.scratch)?;
        normalize(&mut self.scratch);
        Ok(kl_log(&self.reference, &self.scratch))
    }
}

/// KL divergence from the longest-context prediction to the length-`c`
/// prediction, in nats. Rows are dequantized and renormalized in double
/// precision first.
pub fn kl_to_max_context(store: &PredictionStore, n: usize, c: usize) -> Result<f64, MetricsError> {
    store.resolve(n, c)?;
    Ok(RowCache::new(store, n)?.kl(store, n, c)?)
}

/// Assign differences of consecutive metric values to context positions.
fn deltas_from_curve(n: usize, contexts: &[usize], values: &[f64]) -> BTreeMap<usize, f64> {
    contexts
        .windows(2)
        .zip(values.windows(2))
        .map(|(c, v)| (n - c[1] + 1, v[0] - v[1]))
        .collect()
}

pub fn delta_scores(
    store: &PredictionStore,
    doc: &TokenizedDocument,
    n: usize,
    kind: ScoreKind,
) -> Result<BTreeMap<usize, f64>, MetricsError> {
    check_pair(store, doc)?;
    store.resolve(n, store.reference_context(n))?;
    let contexts: Vec<usize> = store.covered_contexts(n).collect();
    let values = match kind {
        ScoreKind::Kl => {
            let mut cache = RowCache::new(store, n)?;
            contexts
                .iter()
                .map(|&c| cache.kl(store, n, c))
                .collect::<Result<Vec<_>, _>>()?
        }
        ScoreKind::Nll => {
            let t = doc.target(n) as usize;
            contexts
                .iter()
                .map(|&c| store.cell_value(n, c, t).map(|x| -x))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(deltas_from_curve(n, &contexts, &values))
}

/// Per-target normalized Δ magnitudes `|Δ_m| / Σ|Δ|`.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaWeights {
    Weights(BTreeMap<usize, f64>),
    /// No positive, finite total magnitude to normalize by.
    FlaggedEmpty,
}

impl DeltaWeights {
    pub fn weights(&self) -> Option<&BTreeMap<usize, f64>> {
        match self {
            DeltaWeights::Weights(w) => Some(w),
            DeltaWeights::FlaggedEmpty => None,
        }
    }
}

pub fn normalized_delta_magnitudes(deltas: &BTreeMap<usize, f64>) -> DeltaWeights {
    let total: f64 = deltas.values().map(|d| d.abs()).sum();
    if !(total > 0.0 && total.is_finite()) {
        return DeltaWeights::FlaggedEmpty;
    }
    DeltaWeights::Weights(deltas.iter().map(|(&m, d)| (m, d.abs() / total)).collect())
}

/// All metrics for one target `x_{n+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub n: usize,
    pub target: TokenId,
    /// `min(n, c_max)`.
    pub c_eff: usize,
    /// Longest covered context, the KL reference.
    pub c_ref: usize,
    /// Covered context lengths, ascending; `nll` and `kl` are parallel to it.
    pub contexts: Vec<usize>,
    pub nll: Vec<f64>,
    pub kl: Vec<f64>,
    pub delta_kl: BTreeMap<usize, f64>,
    pub delta_nll: BTreeMap<usize, f64>,
}

impl TargetMetrics {
    pub fn deltas(&self, kind: ScoreKind) -> &BTreeMap<usize, f64> {
        match kind {
            ScoreKind::Kl => &self.delta_kl,
            ScoreKind::Nll => &self.delta_nll,
        }
    }

    pub fn nll_at(&self, c: usize) -> Option<f64> {
        self.contexts.binary_search(&c).ok().map(|i| self.nll[i])
    }

    pub fn kl_at(&self, c: usize) -> Option<f64> {
        self.contexts.binary_search(&c).ok().map(|i| self.kl[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub doc_id: String,
    pub doc_len: usize,
    pub c_max: usize,
    pub stride: usize,
    /// Targets for `n = 1..N-1`, in order.
    pub targets: Vec<TargetMetrics>,
}

impl MetricSeries {
    pub fn target(&self, n: usize) -> Option<&TargetMetrics> {
        self.targets.get(n.checked_sub(1)?)
    }
}

fn target_metrics(store: &PredictionStore, doc: &TokenizedDocument, n: usize) -> Result<TargetMetrics, StoreError> {
    let target = doc.target(n);
    let contexts: Vec<usize> = store.covered_contexts(n).collect();
    let mut cache = RowCache::new(store, n)?;
    let mut nll = Vec::with_capacity(contexts.len());
    let mut kl = Vec::with_capacity(contexts.len());
    for &c in &contexts {
        nll.push(-store.cell_value(n, c, target as usize)?);
        kl.push(cache.kl(store, n, c)?);
    }
    Ok(TargetMetrics {
        n,
        target,
        c_eff: store.c_eff(n),
        c_ref: store.reference_context(n),
        delta_kl: deltas_from_curve(n, &contexts, &kl),
        delta_nll: deltas_from_curve(n, &contexts, &nll),
        contexts,
        nll,
        kl,
    })
}

/// Metrics for every target of a document, computed in parallel.
pub fn compute_series(store: &PredictionStore, doc: &TokenizedDocument) -> Result<MetricSeries, MetricsError> {
    check_pair(store, doc)?;
    let targets = (1..doc.len())
        .into_par_iter()
        .map(|n| target_metrics(store, doc, n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricSeries {
        doc_id: doc.doc_id.clone(),
        doc_len: doc.len(),
        c_max: store.c_max(),
        stride: store.stride(),
        targets,
    })
}
