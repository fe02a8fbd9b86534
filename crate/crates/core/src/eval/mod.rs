//! Metrics, held-out evaluation, end-to-end runs and reports.

pub mod experiment;
pub mod metrics;
pub mod report;

pub use experiment::{evaluate, evaluation_report, files, run_experiment, tokenizer_metrics, Corpus, EvalConfig, Experiment, ExperimentConfig};
pub use metrics::{ade_fde, mpjpe, per_stream_nll};
pub use report::{layout_nll, recon_curves, report, MetricsReport, ReportOutput};
