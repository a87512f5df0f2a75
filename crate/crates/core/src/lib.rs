//! Context length probing: evaluate every target token of a document under
//! every context length up to `c_max`, store the predictions, and derive
//! loss, KL and differential importance (Δ) scores from them.

pub mod aggregate;
pub mod backends;
pub mod corpus;
pub mod export;
pub mod metrics;
pub mod scheduler;
pub mod store;
pub mod types;

pub use backends::{direct_reduced_probability, BackendDescriptor, BackendError, LanguageModel, SegmentRows};
pub use metrics::{compute_series, MetricSeries, ScoreKind, TargetMetrics};
pub use scheduler::{plan_segments, probe_cost, run_probe, ProbeCost, ProbeError, RunManifest, Segment, SegmentPlan};
pub use store::{PredictionStore, StoreError};
pub use types::{ProbeConfig, StoreDtype, TokenId, TokenizedDocument, Vocab, DEFAULT_C_MAX};
