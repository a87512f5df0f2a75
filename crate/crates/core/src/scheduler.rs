//! Sliding-window planning and execution.
//!
//! Running the model on segment `x_s..x_{s+L-1}` yields, at in-segment offset
//! `i`, the prediction for `x_{s+i}` from a context of exactly `i` tokens. A
//! plan of windows starting at `1, 1+k, 1+2k, ...` therefore fills every
//! `(n, c)` cell with `(n - c) mod k == 0` exactly once.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, LanguageModel};
use crate::store::{PredictionStore, SegmentWriter, StoreError};
use crate::types::{ProbeConfig, TokenizedDocument, TypeError};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid plan parameters: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Input(#[from] TypeError),
    #[error("backend {backend:?} accepts segments of at most {max} tokens, c_max is {c_max}")]
    SegmentLimit { backend: String, max: usize, c_max: usize },
    #[error("document {doc_id:?}, segment {segment} (start {start}, length {len}): {source}")]
    Backend {
        doc_id: String,
        segment: usize,
        start: usize,
        len: usize,
        #[source]
        source: BackendError,
    },
    #[error("document {doc_id:?}: {source}")]
    Store {
        doc_id: String,
        #[source]
        source: StoreError,
    },
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error("writing run manifest: {0}")]
    Manifest(#[from] std::io::Error),
}

/// One evaluation window: tokens `x_start..x_{start+len-1}` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// Cells `(n, c)` this segment fills.
    pub fn cells(self) -> impl Iterator<Item = (usize, usize)> {
        (1..=self.len).map(move |i| (self.start + i - 1, i))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    entries: Vec<Segment>,
    doc_len: usize,
    c_max: usize,
    stride: usize,
}

impl SegmentPlan {
    pub fn entries(&self) -> &[Segment] {
        &self.entries
    }

    pub fn doc_len(&self) -> usize {
        self.doc_len
    }

    pub fn c_max(&self) -> usize {
        self.c_max
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn row_count(&self) -> usize {
        self.entries.iter().map(|s| s.len).sum()
    }

    /// Closed-form coverage test.
    pub fn covers(&self, n: usize, c: usize) -> bool {
        n >= 1 && n < self.doc_len && c >= 1 && c <= n.min(self.c_max) && (n - c).is_multiple_of(self.stride)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().flat_map(|s| s.cells())
    }
}

pub fn plan_segments(doc_len: usize, c_max: usize, stride: usize) -> Result<SegmentPlan, ProbeError> {
    if doc_len < 2 {
        return Err(ProbeError::InvalidPlan(format!(
            "document length must be at least 2, got {doc_len}"
        )));
    }
    if c_max < 1 {
        return Err(ProbeError::InvalidPlan("c_max must be at least 1".into()));
    }
    if stride < 1 || stride > c_max {
        return Err(ProbeError::InvalidPlan(format!(
            "stride must lie in 1..={c_max}, got {stride}"
        )));
    }
    // the window starting at N would only predict x_{N+1}
    let entries = (1..doc_len)
        .step_by(stride)
        .map(|start| Segment {
            start,
            len: c_max.min(doc_len - start),
        })
        .collect();
    Ok(SegmentPlan {
        entries,
        doc_len,
        c_max,
        stride,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeCost {
    /// Segment evaluations.
    pub segments: usize,
    /// Stored log-probability rows.
    pub rows: usize,
}

impl ProbeCost {
    /// Backend calls when segments are sent `batch_size` at a time.
    pub fn batches(&self, batch_size: usize) -> usize {
        self.segments.div_ceil(batch_size.max(1))
    }

    /// Payload bytes for a given vocabulary and element size.
    pub fn payload_bytes(&self, vocab_size: usize, elem_bytes: usize) -> usize {
        self.rows * vocab_size * elem_bytes
    }
}

pub fn probe_cost(doc_len: usize, c_max: usize, stride: usize) -> Result<ProbeCost, ProbeError> {
    let plan = plan_segments(doc_len, c_max, stride)?;
    Ok(ProbeCost {
        segments: plan.entries().len(),
        rows: plan.row_count(),
    })
}

/// Fill a prediction store for one document.
///
/// Segments are sent to the backend in plan-order slices of
/// `config.batch_size`; up to `config.parallelism` batches run at once, each
/// writing only its own rows.
pub fn run_probe(
    backend: &dyn LanguageModel,
    doc: &TokenizedDocument,
    config: &ProbeConfig,
) -> Result<PredictionStore, ProbeError> {
    config.validate()?;
    let desc = backend.descriptor();
    doc.validate(desc.vocab.size())?;
    if config.c_max > desc.max_segment_len {
        return Err(ProbeError::SegmentLimit {
            backend: desc.name.clone(),
            max: desc.max_segment_len,
            c_max: config.c_max,
        });
    }
    let plan = plan_segments(doc.len(), config.c_max, config.stride)?;
    let mut builder = PredictionStore::builder(plan, desc.vocab.size(), config.store_dtype);

    let mut batches: Vec<Vec<SegmentWriter<'_>>> = Vec::new();
    for w in builder.segment_writers() {
        match batches.last_mut() {
            Some(b) if b.len() < config.batch_size => b.push(w),
            _ => batches.push(vec![w]),
        }
    }

    let run_batch = |mut batch: Vec<SegmentWriter<'_>>| -> Result<(), ProbeError> {
        let inputs: Vec<&[_]> = batch
            .iter()
            .map(|w| &doc.token_ids[w.segment.start - 1..w.segment.start - 1 + w.segment.len])
            .collect();
        let first = &batch[0];
        let outputs = backend.evaluate_batch(&inputs).map_err(|source| {
            let (segment, start, len) = match &source {
                BackendError::Protocol { segment, .. } if *segment < batch.len() => {
                    let w = &batch[*segment];
                    (w.index, w.segment.start, w.segment.len)
                }
                _ => (first.index, first.segment.start, first.segment.len),
            };
            ProbeError::Backend {
                doc_id: doc.doc_id.clone(),
                segment,
                start,
                len,
                source,
            }
        })?;
        if outputs.len() != batch.len() {
            return Err(ProbeError::Backend {
                doc_id: doc.doc_id.clone(),
                segment: first.index,
                start: first.segment.start,
                len: first.segment.len,
                source: BackendError::Protocol {
                    segment: 0,
                    row: None,
                    message: format!(
                        "batch of {} segments answered with {} entries",
                        batch.len(),
                        outputs.len()
                    ),
                },
            });
        }
        for (w, rows) in batch.iter_mut().zip(outputs) {
            w.write(rows.as_flat()).map_err(|source| ProbeError::Store {
                doc_id: doc.doc_id.clone(),
                source,
            })?;
        }
        Ok(())
    };

    if config.parallelism <= 1 {
        batches.into_iter().try_for_each(run_batch)?;
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| ProbeError::Pool(e.to_string()))?;
        pool.install(|| batches.into_par_iter().try_for_each(run_batch))?;
    }
    Ok(builder.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSummary {
    pub name: String,
    pub vocab_size: usize,
    pub max_segment_len: usize,
}

/// JSON record written next to each store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub doc_id: String,
    pub doc_len: usize,
    pub config: ProbeConfig,
    pub backend: BackendSummary,
    pub wall_time_secs: f64,
    pub segment_count: usize,
    pub row_count: usize,
    pub store_file: String,
}

/// Output file names for one document, derived from a filesystem-safe
/// version of the doc id.
pub fn run_file_stem(doc_id: &str) -> String {
    doc_id
        .chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || "-_.".contains(ch) {
                ch
            } else {
                '_'
            }
        })
        .collect()
}

pub fn store_path(out_dir: &Path, doc_id: &str) -> PathBuf {
    out_dir.join(format!("{}.clps", run_file_stem(doc_id)))
}

pub fn manifest_path(out_dir: &Path, doc_id: &str) -> PathBuf {
    out_dir.join(format!("{}.manifest.json", run_file_stem(doc_id)))
}

/// Probe a document and persist the store plus its manifest. Nothing is
/// written unless the whole run succeeds.
pub fn probe_to_dir(
    backend: &dyn LanguageModel,
    doc: &TokenizedDocument,
    config: &ProbeConfig,
    out_dir: &Path,
) -> Result<RunManifest, ProbeError> {
    let t0 = Instant::now();
    let store = run_probe(backend, doc, config)?;
    let wall_time_secs = t0.elapsed().as_secs_f64();
    let path = store_path(out_dir, &doc.doc_id);
    store.save(&path).map_err(|source| ProbeError::Store {
        doc_id: doc.doc_id.clone(),
        source,
    })?;
    let desc = backend.descriptor();
    let manifest = RunManifest {
        doc_id: doc.doc_id.clone(),
        doc_len: doc.len(),
        config: config.clone(),
        backend: BackendSummary {
            name: desc.name.clone(),
            vocab_size: desc.vocab.size(),
            max_segment_len: desc.max_segment_len,
        },
        wall_time_secs,
        segment_count: store.plan().entries().len(),
        row_count: store.row_count(),
        store_file: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path(out_dir, &doc.doc_id), json)?;
    Ok(manifest)
}
