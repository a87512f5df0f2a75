//! Viewer bundles and CSV curves.
//!
//! A bundle is one JSON file per document with top-level keys
//! `schema_version`, `doc`, `targets` and `manifest`. Non-finite numbers
//! (an infinite KL, say) are written as the strings `"inf"`, `"-inf"` and
//! `"nan"` since JSON has no literal for them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::aggregate::{AggregateReport, CurvePoint, Section};
use crate::backends::log_sum_exp;
use crate::metrics::MetricSeries;
use crate::scheduler::{run_file_stem, BackendSummary};
use crate::store::{PredictionStore, StoreError};
use crate::types::{ProbeConfig, TokenId, TokenizedDocument, Vocab};

pub const BUNDLE_SCHEMA_VERSION: &str = "1.0";
/// Context lengths up to this value are always kept in bundle curves.
pub const FULL_RESOLUTION_LIMIT: usize = 64;
/// Ratio between consecutive retained context lengths above the limit.
pub const GEOMETRIC_RATIO: f64 = 1.25;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("series/store mismatch: {0}")]
    Mismatch(String),
    #[error("store error: {0}")]
    Store(#[from] StoreError),
    #[error("unsupported bundle schema version {0:?}")]
    UnsupportedSchema(String),
    #[error("invalid bundle: {0}")]
    Invalid(String),
    #[error("bundle JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// An `f64` that survives JSON even when it is not finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JsonF64(pub f64);

impl Serialize for JsonF64 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for JsonF64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(JsonF64(v)),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(JsonF64(f64::INFINITY)),
                "-inf" => Ok(JsonF64(f64::NEG_INFINITY)),
                "nan" => Ok(JsonF64(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleDoc {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<TokenId>,
    /// Byte offsets into `text`.
    pub spans: Option<Vec<[usize; 2]>>,
    pub text: Option<String>,
    pub pos_tags: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub m: usize,
    pub score: JsonF64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub token_id: TokenId,
    pub prob: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub n: usize,
    pub target: TokenId,
    pub c_eff: usize,
    pub delta_kl: Vec<DeltaEntry>,
    pub delta_nll: Vec<DeltaEntry>,
    pub retained_c: Vec<usize>,
    pub nll: Vec<JsonF64>,
    pub kl: Vec<JsonF64>,
    /// One list per entry of `retained_c`.
    pub top_k: Vec<Vec<Prediction>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub backend: BackendSummary,
    pub config: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewerBundle {
    pub schema_version: String,
    pub doc: BundleDoc,
    pub targets: Vec<TargetRecord>,
    pub manifest: BundleManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportConfig {
    pub top_k: usize,
    /// Keep every covered context length instead of subsampling above 64.
    pub full_resolution: bool,
}

impl From<&ProbeConfig> for ExportConfig {
    fn from(c: &ProbeConfig) -> Self {
        Self {
            top_k: c.top_k_export,
            full_resolution: false,
        }
    }
}

/// Context lengths kept for a target with effective context `c_eff`:
/// `1..=64` and a geometric tail with ratio [`GEOMETRIC_RATIO`] that always
/// ends at `c_eff`.
pub fn retained_context_lengths(c_eff: usize, full_resolution: bool) -> Vec<usize> {
    if full_resolution || c_eff <= FULL_RESOLUTION_LIMIT {
        return (1..=c_eff).collect();
    }
    let mut out: Vec<usize> = (1..=FULL_RESOLUTION_LIMIT).collect();
    let mut x = FULL_RESOLUTION_LIMIT as f64;
    loop {
        x *= GEOMETRIC_RATIO;
        let c = x.round() as usize;
        if c >= c_eff {
            break;
        }
        if c > *out.last().unwrap() {
            out.push(c);
        }
    }
    out.push(c_eff);
    out
}

/// Retained lengths snapped down to covered ones, for strided stores.
fn retained_covered(store: &PredictionStore, n: usize, full_resolution: bool) -> Vec<usize> {
    let k = store.stride();
    let first = (n - 1) % k + 1;
    let mut out: Vec<usize> = Vec::new();
    for c in retained_context_lengths(store.c_eff(n), full_resolution) {
        if c < first {
            continue;
        }
        let snapped = c - (c - first) % k;
        if out.last() != Some(&snapped) {
            out.push(snapped);
        }
    }
    out
}

/// Top `k` next-token probabilities of a log-prob row, sorted descending
/// (ties by token id).
pub fn top_k_predictions(row: &[f64], k: usize) -> Vec<Prediction> {
    let lse = log_sum_exp(row);
    let mut preds: Vec<Prediction> = row
        .iter()
        .enumerate()
        .map(|(i, &l)| Prediction {
            token_id: i as TokenId,
            prob: (l - lse).exp() as f32,
        })
        .collect();
    preds.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token_id.cmp(&b.token_id)));
    preds.truncate(k.min(row.len()));
    preds
}

fn deltas(map: &std::collections::BTreeMap<usize, f64>) -> Vec<DeltaEntry> {
    map.iter().map(|(&m, &d)| DeltaEntry { m, score: JsonF64(d) }).collect()
}

pub fn export_viewer_bundle(
    doc: &TokenizedDocument,
    series: &MetricSeries,
    store: &PredictionStore,
    vocab: &Vocab,
    manifest: BundleManifest,
    config: ExportConfig,
) -> Result<ViewerBundle, ExportError> {
    if series.doc_id != doc.doc_id || series.doc_len != doc.len() || store.doc_len() != doc.len() {
        return Err(ExportError::Mismatch(format!(
            "document {:?} ({} tokens), series {:?} ({} tokens), store of {} tokens",
            doc.doc_id,
            doc.len(),
            series.doc_id,
            series.doc_len,
            store.doc_len()
        )));
    }
    if series.c_max != store.c_max() || series.stride != store.stride() {
        return Err(ExportError::Mismatch(
            "series and store were made with different plans".into(),
        ));
    }
    if vocab.size() != store.vocab_size() {
        return Err(ExportError::Mismatch(format!(
            "vocabulary has {} entries, store rows {}",
            vocab.size(),
            store.vocab_size()
        )));
    }
    let tokens = doc
        .token_ids
        .iter()
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_string)
                .ok_or_else(|| ExportError::Mismatch(format!("token id {id} is not in the vocabulary")))
        })
        .collect::<Result<_, _>>()?;

    let mut targets = Vec::with_capacity(series.targets.len());
    let mut row = vec![0.0; store.vocab_size()];
    for t in &series.targets {
        let retained_c = retained_covered(store, t.n, config.full_resolution);
        let mut nll = Vec::with_capacity(retained_c.len());
        let mut kl = Vec::with_capacity(retained_c.len());
        let mut top_k = Vec::with_capacity(retained_c.len());
        for &c in &retained_c {
            let (Some(l), Some(d)) = (t.nll_at(c), t.kl_at(c)) else {
                return Err(ExportError::Mismatch(format!(
                    "series has no value at n={}, c={c}",
                    t.n
                )));
            };
            nll.push(JsonF64(l));
            kl.push(JsonF64(d));
            store.cell_into(t.n, c, &mut row)?;
            top_k.push(top_k_predictions(&row, config.top_k));
        }
        targets.push(TargetRecord {
            n: t.n,
            target: t.target,
            c_eff: t.c_eff,
            delta_kl: deltas(&t.delta_kl),
            delta_nll: deltas(&t.delta_nll),
            retained_c,
            nll,
            kl,
            top_k,
        });
    }
    Ok(ViewerBundle {
        schema_version: BUNDLE_SCHEMA_VERSION.to_string(),
        doc: BundleDoc {
            doc_id: doc.doc_id.clone(),
            tokens,
            token_ids: doc.token_ids.clone(),
            spans: doc
                .source_spans
                .as_ref()
                .map(|s| s.iter().map(|r| [r.start, r.end]).collect()),
            text: doc.text.clone(),
            pos_tags: doc.pos_tags.clone(),
        },
        targets,
        manifest,
    })
}

impl ViewerBundle {
    pub fn validate(&self) -> Result<(), ExportError> {
        let major = self.schema_version.split('.').next().unwrap_or("");
        if major != BUNDLE_SCHEMA_VERSION.split('.').next().unwrap() {
            return Err(ExportError::UnsupportedSchema(self.schema_version.clone()));
        }
        let invalid = |msg: String| Err(ExportError::Invalid(msg));
        if self.doc.tokens.len() != self.doc.token_ids.len() {
            return invalid("token strings and ids differ in length".into());
        }
        for t in &self.targets {
            let r = t.retained_c.len();
            if t.nll.len() != r || t.kl.len() != r || t.top_k.len() != r {
                return invalid(format!("target {} has curves of unequal length", t.n));
            }
            if t.delta_kl.iter().chain(&t.delta_nll).any(|d| d.m == 0 || d.m >= t.n) {
                return invalid(format!("target {} has a Δ-score outside 1..n", t.n));
            }
            for list in &t.top_k {
                let sorted = list.windows(2).all(|w| w[0].prob >= w[1].prob);
                let sum: f64 = list.iter().map(|p| p.prob as f64).sum();
                if !sorted || list.iter().any(|p| !(0.0..=1.0).contains(&p.prob)) || sum > 1.0 + 1e-6 {
                    return invalid(format!("target {} has a malformed top-k list", t.n));
                }
            }
        }
        Ok(())
    }
}

pub fn emit_bundle(bundle: &ViewerBundle) -> Result<String, ExportError> {
    Ok(serde_json::to_string(bundle)?)
}

pub fn parse_bundle(json: &str) -> Result<ViewerBundle, ExportError> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: String,
    }
    let v: Version = serde_json::from_str(json)?;
    if v.schema_version.split('.').next() != BUNDLE_SCHEMA_VERSION.split('.').next() {
        return Err(ExportError::UnsupportedSchema(v.schema_version));
    }
    let bundle: ViewerBundle = serde_json::from_str(json)?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn bundle_path(out_dir: &Path, doc_id: &str) -> PathBuf {
    out_dir.join(format!("{}.bundle.json", run_file_stem(doc_id)))
}

/// Write a bundle atomically.
pub fn write_bundle(bundle: &ViewerBundle, path: &Path) -> Result<(), ExportError> {
    let io = |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(emit_bundle(bundle)?.as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub const CSV_HEADER: [&str; 5] = ["group", "c", "mean", "std", "count"];
pub const FIG2_FILE: &str = "fig2_loss_by_context.csv";
pub const FIG3_FILE: &str = "fig3_loss_by_pos.csv";
pub const FIG4_FILE: &str = "fig4_delta_decay.csv";
pub const FIG6_FILE: &str = "fig6_delta_by_pos.csv";

fn write_csv(path: &Path, rows: &[(String, Option<usize>, f64, f64, u64)]) -> Result<(), ExportError> {
    let file = File::create(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(CSV_HEADER)?;
    for (group, c, mean, std, count) in rows {
        w.write_record([
            group.clone(),
            c.map(|c| c.to_string()).unwrap_or_default(),
            mean.to_string(),
            std.to_string(),
            count.to_string(),
        ])?;
    }
    w.flush().map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn curve_rows(group: &str, points: &[CurvePoint]) -> Vec<(String, Option<usize>, f64, f64, u64)> {
    points
        .iter()
        .map(|p| (group.to_string(), Some(p.c), p.mean, p.std, p.count))
        .collect()
}

/// Write the four curve files into `out_dir`; rows of the Δ-by-POS file
/// leave `c` empty.
/// Empty report sections produce header-only files.
pub fn export_curves_csv(report: &AggregateReport, out_dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    let fig2 = curve_rows("all", &report.loss_by_c);
    let fig3 = match &report.loss_by_c_and_pos {
        Section::Ready(groups) => groups.iter().flat_map(|(tag, g)| curve_rows(tag, &g.points)).collect(),
        Section::Empty { .. } => Vec::new(),
    };
    let fig4 = match &report.delta_decay {
        Section::Ready(d) => curve_rows("all", &d.points),
        Section::Empty { .. } => Vec::new(),
    };
    let fig6 = match &report.delta_by_pos {
        Section::Ready(tags) => tags
            .iter()
            .map(|(tag, m)| (tag.clone(), None, m.mean, m.std, m.count))
            .collect(),
        Section::Empty { .. } => Vec::new(),
    };
    let mut paths = Vec::new();
    for (name, rows) in [
        (FIG2_FILE, fig2),
        (FIG3_FILE, fig3),
        (FIG4_FILE, fig4),
        (FIG6_FILE, fig6),
    ] {
        let p = out_dir.join(name);
        write_csv(&p, &rows)?;
        paths.push(p);
    }
    Ok(paths)
}
