//! Metrics, report files, robustness sweeps and residual spectra.

mod metrics;
mod report;
mod spectrum;
mod sweep;

pub use metrics::{average_precision, balanced_accuracy, mean_score, ScoredSample};
pub use report::{Metric, MetricRow, MetricsReport, RowContext, CSV_HEADER};
pub use spectrum::{
    denoise_residuals, mean_radial_profile, radial_power, residual_spectrum, RadialProfile,
};
pub use sweep::{robustness_sweep, score_dataset, PostOp, SweepGrid};
