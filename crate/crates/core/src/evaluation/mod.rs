//! Dataset manifests, metrics and the benchmark harness.

mod harness;
mod manifest;
mod metrics;
pub mod reference;
mod registry;

use thiserror::Error;

pub use harness::{
    modules_label, prompt_hash, render_report, run_ablation, run_benchmark, run_caption_sweep,
    write_run_dir, BenchmarkConfig, BenchmarkRun, DescriptionCache, RunFingerprint, SupportSet,
    Trace,
};
pub use manifest::{DatasetManifest, EvalMode, ManifestExample, ManifestHeader};
pub use metrics::{
    accuracy, mean_per_class_accuracy, normalize_answer, roc_auc, roc_auc_scores, vqa_accuracy,
    vqa_score, EvalRecord, Gold, MetricError, MetricKind, MetricResult,
};
pub use registry::{registry_entry, RegistryEntry, REGISTRY};

use crate::vision::VisionError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("support set overlaps the evaluation set: {0}")]
    SupportOverlap(String),
    #[error("few-shot evaluation needs a support manifest")]
    MissingSupport,
    #[error("failure rate {rate:.3} exceeds the allowed {max:.3}")]
    FailureRateExceeded { rate: f64, max: f64 },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
