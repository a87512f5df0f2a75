//! Corpus-level summaries: loss by context length (overall and by target
//! POS), decay of normalized Δ magnitudes with context length, and mean
//! Δ-score by context-token POS.
//!
//! Every mean is reported with its count. Per-document partial results are
//! [`Moments`] accumulators, computed in parallel and merged in document
//! order so that reruns give bit-identical reports.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::POS_NONE;
use crate::metrics::{normalized_delta_magnitudes, DeltaWeights, MetricSeries, ScoreKind};
use crate::types::TokenizedDocument;

/// Tags rarer than this are dropped from loss-by-POS curves.
pub const DEFAULT_MIN_POS_COUNT: u64 = 100;
/// Only targets at or beyond this position enter the Δ-decay curve.
pub const DEFAULT_MIN_POSITION: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("no metric series to aggregate")]
    EmptySeries,
    #[error("series disagree: {0}")]
    Inconsistent(String),
    #[error("no POS-tagged documents")]
    NoTaggedDocuments,
    #[error("no document for series {0:?}")]
    MissingDocument(String),
    #[error("no qualifying positions: {0}")]
    NoQualifyingPositions(String),
}

/// Count, mean and sum of squared deviations; merged with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub c: usize,
    pub mean: f64,
    pub std: f64,
    pub count: u64,
}

fn to_curve(acc: &BTreeMap<usize, Moments>) -> Vec<CurvePoint> {
    acc.iter()
        .filter(|(_, m)| m.count > 0)
        .map(|(&c, m)| CurvePoint {
            c,
            mean: m.mean,
            std: m.std(),
            count: m.count,
        })
        .collect()
}

fn merge_maps<K: Ord + Clone>(mut a: BTreeMap<K, Moments>, b: BTreeMap<K, Moments>) -> BTreeMap<K, Moments> {
    for (k, m) in b {
        a.entry(k).or_default().merge(&m);
    }
    a
}

fn check_series(series: &[MetricSeries]) -> Result<(usize, usize), AggregateError> {
    let first = series.first().ok_or(AggregateError::EmptySeries)?;
    for s in series {
        if s.c_max != first.c_max || s.stride != first.stride {
            return Err(AggregateError::Inconsistent(format!(
                "{:?} has c_max={}, stride={}; {:?} has c_max={}, stride={}",
                first.doc_id, first.c_max, first.stride, s.doc_id, s.c_max, s.stride
            )));
        }
    }
    Ok((first.c_max, first.stride))
}

/// Mean NLL at each context length over all targets whose cell at that
/// length is covered (targets with `n < c` are not clamped in).
pub fn mean_loss_by_context_length(series: &[MetricSeries], c_max: usize) -> Result<Vec<CurvePoint>, AggregateError> {
    let (series_c_max, _) = check_series(series)?;
    if series_c_max != c_max {
        return Err(AggregateError::Inconsistent(format!(
            "requested c_max={c_max}, series were probed with {series_c_max}"
        )));
    }
    let acc = series
        .par_iter()
        .map(|s| {
            let mut acc: BTreeMap<usize, Moments> = BTreeMap::new();
            for t in &s.targets {
                for (&c, &l) in t.contexts.iter().zip(&t.nll) {
                    acc.entry(c).or_default().push(l);
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(BTreeMap::new(), merge_maps);
    Ok(to_curve(&acc))
}

fn doc_index(docs: &[TokenizedDocument]) -> HashMap<&str, &TokenizedDocument> {
    docs.iter().map(|d| (d.doc_id.as_str(), d)).collect()
}

fn tagged_pairs<'a>(
    series: &'a [MetricSeries],
    docs: &'a [TokenizedDocument],
) -> Result<Vec<(&'a MetricSeries, &'a [String])>, AggregateError> {
    let index = doc_index(docs);
    let mut out = Vec::new();
    for s in series {
        let doc = index
            .get(s.doc_id.as_str())
            .ok_or_else(|| AggregateError::MissingDocument(s.doc_id.clone()))?;
        if doc.len() != s.doc_len {
            return Err(AggregateError::Inconsistent(format!(
                "document {:?} has {} tokens, its series {}",
                s.doc_id,
                doc.len(),
                s.doc_len
            )));
        }
        if let Some(tags) = &doc.pos_tags {
            out.push((s, tags.as_slice()));
        }
    }
    if out.is_empty() {
        return Err(AggregateError::NoTaggedDocuments);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosCurve {
    /// Targets carrying this tag.
    pub occurrences: u64,
    pub points: Vec<CurvePoint>,
}

/// Loss-by-context-length curves grouped by the POS tag of the target token.
/// `NONE` and tags with fewer than `min_count` target occurrences are left
/// out.
pub fn mean_loss_by_pos(
    series: &[MetricSeries],
    docs: &[TokenizedDocument],
    min_count: u64,
) -> Result<BTreeMap<String, PosCurve>, AggregateError> {
    check_series(series)?;
    let pairs = tagged_pairs(series, docs)?;
    type Acc = BTreeMap<String, (u64, BTreeMap<usize, Moments>)>;
    let acc: Acc = pairs
        .par_iter()
        .map(|(s, tags)| {
            let mut acc: Acc = BTreeMap::new();
            for t in &s.targets {
                // target x_{n+1} is tags[n]
                let tag = &tags[t.n];
                if tag == POS_NONE {
                    continue;
                }
                let (occ, curve) = acc.entry(tag.clone()).or_default();
                *occ += 1;
                for (&c, &l) in t.contexts.iter().zip(&t.nll) {
                    curve.entry(c).or_default().push(l);
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(BTreeMap::new(), |mut a, b| {
            for (tag, (occ, curve)) in b {
                let e = a.entry(tag).or_default();
                e.0 += occ;
                e.1 = merge_maps(std::mem::take(&mut e.1), curve);
            }
            a
        });
    Ok(acc
        .into_iter()
        .filter(|(_, (occ, _))| *occ >= min_count.max(1))
        .map(|(tag, (occurrences, curve))| {
            (
                tag,
                PosCurve {
                    occurrences,
                    points: to_curve(&curve),
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaDecay {
    /// Per context length `c` at which the scored token enters the context:
    /// mean and std of `log10` of its normalized Δ magnitude.
    pub points: Vec<CurvePoint>,
    pub qualifying_targets: u64,
    /// Targets at or past `min_position` whose Δ map was all zero.
    pub flagged_targets: u64,
    /// Zero weights have no logarithm and are skipped.
    pub zero_weights: u64,
}

pub fn delta_magnitude_decay(
    series: &[MetricSeries],
    min_position: usize,
    kind: ScoreKind,
) -> Result<DeltaDecay, AggregateError> {
    check_series(series)?;
    let (acc, qualifying, flagged, zero_weights) = series
        .par_iter()
        .map(|s| {
            let mut acc: BTreeMap<usize, Moments> = BTreeMap::new();
            let (mut q, mut f, mut z) = (0u64, 0u64, 0u64);
            for t in s.targets.iter().filter(|t| t.n >= min_position) {
                match normalized_delta_magnitudes(t.deltas(kind)) {
                    DeltaWeights::FlaggedEmpty => f += 1,
                    DeltaWeights::Weights(w) => {
                        q += 1;
                        for (&m, &wm) in &w {
                            if wm > 0.0 {
                                acc.entry(t.n - m + 1).or_default().push(wm.log10());
                            } else {
                                z += 1;
                            }
                        }
                    }
                }
            }
            (acc, q, f, z)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((BTreeMap::new(), 0, 0, 0), |a, b| {
            (merge_maps(a.0, b.0), a.1 + b.1, a.2 + b.2, a.3 + b.3)
        });
    if qualifying == 0 {
        let reason = if flagged > 0 {
            format!("all {flagged} targets at n >= {min_position} have all-zero Δ-scores")
        } else {
            format!("no target positions n >= {min_position}")
        };
        return Err(AggregateError::NoQualifyingPositions(reason));
    }
    Ok(DeltaDecay {
        points: to_curve(&acc),
        qualifying_targets: qualifying,
        flagged_targets: flagged,
        zero_weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagMean {
    pub mean: f64,
    pub std: f64,
    pub count: u64,
}

/// Mean Δ-score keyed by the POS tag of the context token `x_m`.
pub fn mean_delta_by_pos(
    series: &[MetricSeries],
    docs: &[TokenizedDocument],
    kind: ScoreKind,
) -> Result<BTreeMap<String, TagMean>, AggregateError> {
    check_series(series)?;
    let pairs = tagged_pairs(series, docs)?;
    let acc = pairs
        .par_iter()
        .map(|(s, tags)| {
            let mut acc: BTreeMap<String, Moments> = BTreeMap::new();
            for t in &s.targets {
                for (&m, &d) in t.deltas(kind) {
                    let tag = &tags[m - 1];
                    if tag != POS_NONE {
                        acc.entry(tag.clone()).or_default().push(d);
                    }
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(BTreeMap::new(), merge_maps);
    Ok(acc
        .into_iter()
        .map(|(tag, m)| {
            (
                tag,
                TagMean {
                    mean: m.mean,
                    std: m.std(),
                    count: m.count,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateConfig {
    pub min_pos_count: u64,
    pub min_position: usize,
    pub delta_kind: ScoreKind,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            min_pos_count: DEFAULT_MIN_POS_COUNT,
            min_position: DEFAULT_MIN_POSITION,
            delta_kind: ScoreKind::Kl,
        }
    }
}

/// A pipeline section that may legitimately come out empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Section<T> {
    Ready(T),
    Empty { empty_reason: String },
}

impl<T> Section<T> {
    fn from_result(r: Result<T, AggregateError>) -> Self {
        match r {
            Ok(v) => Section::Ready(v),
            Err(e) => Section::Empty {
                empty_reason: e.to_string(),
            },
        }
    }

    pub fn ready(&self) -> Option<&T> {
        match self {
            Section::Ready(v) => Some(v),
            Section::Empty { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub c_max: usize,
    pub stride: usize,
    pub documents: usize,
    pub loss_by_c: Vec<CurvePoint>,
    pub loss_by_c_and_pos: Section<BTreeMap<String, PosCurve>>,
    pub delta_decay: Section<DeltaDecay>,
    pub delta_by_pos: Section<BTreeMap<String, TagMean>>,
    pub config: AggregateConfig,
}

pub fn build_report(
    series: &[MetricSeries],
    docs: &[TokenizedDocument],
    config: AggregateConfig,
) -> Result<AggregateReport, AggregateError> {
    let (c_max, stride) = check_series(series)?;
    Ok(AggregateReport {
        c_max,
        stride,
        documents: series.len(),
        loss_by_c: mean_loss_by_context_length(series, c_max)?,
        loss_by_c_and_pos: Section::from_result(mean_loss_by_pos(series, docs, config.min_pos_count)),
        delta_decay: Section::from_result(delta_magnitude_decay(series, config.min_position, config.delta_kind)),
        delta_by_pos: Section::from_result(mean_delta_by_pos(series, docs, config.delta_kind)),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::TargetMetrics;
    use proptest::prelude::*;

    /// Series with hand-set values: nll(n, c) = f(n, c), Δ given per target.
    fn series(
        doc_id: &str,
        n_tokens: usize,
        c_max: usize,
        f: impl Fn(usize, usize) -> f64,
        deltas: impl Fn(usize) -> BTreeMap<usize, f64>,
    ) -> MetricSeries {
        let targets = (1..n_tokens)
            .map(|n| {
                let ce = n.min(c_max);
                let contexts: Vec<usize> = (1..=ce).collect();
                TargetMetrics {
                    n,
                    target: 0,
                    c_eff: ce,
                    c_ref: ce,
                    nll: contexts.iter().map(|&c| f(n, c)).collect(),
                    kl: vec![0.0; ce],
                    delta_kl: deltas(n),
                    delta_nll: BTreeMap::new(),
                    contexts,
                }
            })
            .collect();
        MetricSeries {
            doc_id: doc_id.into(),
            doc_len: n_tokens,
            c_max,
            stride: 1,
            targets,
        }
    }

    fn tagged(doc_id: &str, tags: &[&str]) -> TokenizedDocument {
        let mut d = TokenizedDocument::new(doc_id, vec![0; tags.len()]);
        d.pos_tags = Some(tags.iter().map(|t| t.to_string()).collect());
        d
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs = [1.0, 2.0, 4.0, 8.0, 3.0];
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Moments::default(), Moments::default());
        xs[..2].iter().for_each(|&x| a.push(x));
        xs[2..].iter().for_each(|&x| b.push(x));
        let mut ab = a;
        ab.merge(&b);
        let mut ba = b;
        ba.merge(&a);
        assert_eq!(ab.count, 5);
        assert!((ab.mean - 3.6).abs() < 1e-12 && (ba.mean - 3.6).abs() < 1e-12);
        assert!((ab.std() - all.std()).abs() < 1e-12);
    }

    #[test]
    fn flat_curve_and_counts() {
        let s = series("d", 6, 3, |_, _| 0.5, |_| BTreeMap::new());
        let curve = mean_loss_by_context_length(&[s], 3).unwrap();
        assert_eq!(curve.iter().map(|p| p.count).collect::<Vec<_>>(), vec![5, 4, 3]);
        assert!(curve.iter().all(|p| p.mean == 0.5 && p.std == 0.0));
    }

    #[test]
    fn two_token_document_has_one_point() {
        let s = series("d", 2, 1023, |_, _| 1.0, |_| BTreeMap::new());
        let curve = mean_loss_by_context_length(&[s], 1023).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!((curve[0].c, curve[0].count), (1, 1));
    }

    #[test]
    fn errors() {
        assert_eq!(mean_loss_by_context_length(&[], 3), Err(AggregateError::EmptySeries));
        let a = series("a", 4, 3, |_, _| 0.0, |_| BTreeMap::new());
        let b = series("b", 4, 2, |_, _| 0.0, |_| BTreeMap::new());
        assert!(matches!(
            mean_loss_by_context_length(&[a.clone(), b], 3),
            Err(AggregateError::Inconsistent(_))
        ));
        let untagged = TokenizedDocument::new("a", vec![0; 4]);
        assert_eq!(
            mean_loss_by_pos(std::slice::from_ref(&a), &[untagged], 1),
            Err(AggregateError::NoTaggedDocuments)
        );
        assert!(matches!(
            mean_loss_by_pos(&[a], &[], 1),
            Err(AggregateError::MissingDocument(_))
        ));
    }

    #[test]
    fn single_tag_equals_overall() {
        let s = series("d", 8, 4, |n, c| (n * c) as f64 * 0.1, |_| BTreeMap::new());
        let d = tagged("d", &["NOUN"; 8]);
        let overall = mean_loss_by_context_length(std::slice::from_ref(&s), 4).unwrap();
        let by_pos = mean_loss_by_pos(&[s], &[d], 1).unwrap();
        assert_eq!(by_pos.len(), 1);
        assert_eq!(by_pos["NOUN"].points, overall);
    }

    #[test]
    fn rare_tags_and_none_are_excluded() {
        // 99 NOUN targets, 1 VERB target, NONE on the rest
        let mut tags = vec!["X"];
        tags.extend(std::iter::repeat_n("NOUN", 99));
        tags.push("VERB");
        tags.push(POS_NONE);
        let n = tags.len();
        let s = series("d", n, 2, |_, _| 1.0, |_| BTreeMap::new());
        let d = tagged("d", &tags);
        assert!(mean_loss_by_pos(
            std::slice::from_ref(&s),
            std::slice::from_ref(&d),
            DEFAULT_MIN_POS_COUNT
        )
        .unwrap()
        .is_empty());
        let r = mean_loss_by_pos(&[s], &[d], 99).unwrap();
        assert_eq!(r.keys().collect::<Vec<_>>(), vec!["NOUN"]);
        assert_eq!(r["NOUN"].occurrences, 99);
    }

    #[test]
    fn decay_single_mass_and_uniform() {
        // each target puts all Δ mass on the token 4 positions back (enters at c=5)
        let s = series(
            "d",
            30,
            8,
            |_, _| 0.0,
            |n| {
                if n > 5 {
                    BTreeMap::from([(n - 4, 0.7), (n - 1, 0.0)])
                } else {
                    BTreeMap::new()
                }
            },
        );
        let r = delta_magnitude_decay(&[s], 10, ScoreKind::Kl).unwrap();
        assert_eq!(r.points.len(), 1);
        assert_eq!((r.points[0].c, r.points[0].mean), (5, 0.0));
        assert_eq!(r.qualifying_targets, 20);
        assert_eq!(r.zero_weights, 20);

        let s = series(
            "d",
            30,
            8,
            |_, _| 0.0,
            |n| (n.saturating_sub(7)..n).filter(|&m| m >= 1).map(|m| (m, 1.0)).collect(),
        );
        let r = delta_magnitude_decay(&[s], 10, ScoreKind::Kl).unwrap();
        for p in &r.points {
            assert!((p.mean + 7f64.log10()).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_reports_reason_when_empty() {
        let s = series("d", 30, 8, |_, _| 0.0, |n| BTreeMap::from([(n, 0.0)]));
        match delta_magnitude_decay(std::slice::from_ref(&s), 10, ScoreKind::Kl) {
            Err(AggregateError::NoQualifyingPositions(r)) => assert!(r.contains("all-zero")),
            other => panic!("{other:?}"),
        }
        match delta_magnitude_decay(&[s], 1024, ScoreKind::Kl) {
            Err(AggregateError::NoQualifyingPositions(r)) => assert!(r.contains("no target")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn delta_by_context_pos() {
        let s = series(
            "d",
            4,
            3,
            |_, _| 0.0,
            |n| {
                if n == 3 {
                    BTreeMap::from([(2, 0.2)])
                } else {
                    BTreeMap::new()
                }
            },
        );
        let d = tagged("d", &["DET", "NOUN", "VERB", "X"]);
        let r = mean_delta_by_pos(&[s], &[d], ScoreKind::Kl).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!((r["NOUN"].mean, r["NOUN"].count), (0.2, 1));
    }

    #[test]
    fn report_collects_sections() {
        let s = series("d", 6, 3, |_, _| 1.0, |_| BTreeMap::new());
        let d = tagged("d", &["A"; 6]);
        let r = build_report(
            &[s],
            &[d],
            AggregateConfig {
                min_pos_count: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.loss_by_c_and_pos.ready().is_some());
        assert!(r.delta_decay.ready().is_none());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("empty_reason"));
        let back: AggregateReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn partition_identity(tags in prop::collection::vec(prop_oneof![Just("A"), Just("B"), Just("C")], 3..60), seed in 0u64..1000) {
            let n = tags.len();
            let s = series("d", n, 6, |a, c| ((a * 31 + c * 17 + seed as usize) % 97) as f64 / 13.0, |_| BTreeMap::new());
            let d = tagged("d", &tags);
            let overall = mean_loss_by_context_length(std::slice::from_ref(&s), 6).unwrap();
            let groups = mean_loss_by_pos(&[s], &[d], 1).unwrap();
            for p in &overall {
                let (mut num, mut cnt) = (0.0, 0u64);
                for g in groups.values() {
                    if let Some(q) = g.points.iter().find(|q| q.c == p.c) {
                        num += q.mean * q.count as f64;
                        cnt += q.count;
                    }
                }
                prop_assert_eq!(cnt, p.count);
                prop_assert!((num / cnt as f64 - p.mean).abs() < 1e-9);
            }
        }
    }
}
