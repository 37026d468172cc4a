//! Clustering, probing and error analysis over idiom embeddings.

pub mod cluster;
pub mod errors;
pub mod intrinsic;
pub mod metrics;
pub mod probe;
pub mod report;

pub use cluster::{agglomerative_cluster, complete_linkage, cosine_distance_matrix, Dendrogram, Merge};
pub use errors::{categorize_span_error, categorize_span_errors, ErrorBreakdown, ErrorCategory, SpanErrorContext};
pub use intrinsic::{
    evaluate_intrinsic, homogeneity_score, mean_intergroup_distance, normalize_score, precision_at_k, Anchors,
    IntrinsicReport, PrecisionAtK,
};
pub use metrics::{
    disambiguation_metrics, pearson, per_idiom_accuracy, per_idiom_correlation, span_metrics, DisambiguationMetrics, SpanMetrics};
pub use probe::{
    gold_tags, predict_disambiguation, predict_span, train_probe, FrozenEmbedder, Probe, ProbeConfig, ProbeExample,
    ProbeMeta, ProbeOutcome, ProbeTask,
};
pub use report::{
    compare_variants, extrinsic_table, intrinsic_table, majority_baseline, Comparison, EvalReport, ExtrinsicRow, IdiomCorrelation,
    IntrinsicRow, LabelPrediction, MajorityBaseline, TagPrediction,
};
