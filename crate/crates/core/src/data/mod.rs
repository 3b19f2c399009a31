//! Feature files, manifests, cross-validation splits, the synthetic corpus
//! and evaluation metrics.

pub mod feature;
pub mod folds;
pub mod manifest;
pub mod metrics;
pub mod synth;

pub use feature::{load_feature_file, FeatureFile};
pub use folds::{make_folds, stratified_folds, FoldSplit};
pub use manifest::{Dataset, DatasetManifest, LabelMap, ManifestEntry, ManifestRow, LABEL_MAP_FILE};
pub use metrics::{
    compute_metrics, confusion_matrix, write_confusion, write_fold_metrics,
    CrossValidationSummary, MeanStd, MetricsReport,
};
pub use synth::{nearest_carrier, periodogram, synth_generate, Envelope, SyntheticSpec};
