//! Cross-validation protocol, metrics and per-field reports.

pub mod cv;
pub mod folds;
pub mod metrics;
pub mod report;

pub use cv::{evaluate_cv, AblationTable, CvOutcome, FieldPrediction, MetricRow, MetricsTable, ModelSpec, RunInfo};
pub use folds::{make_folds, FoldAssignment};
pub use metrics::{mape, r2};
pub use report::{field_report, ReportBundle, ReportSummary};
