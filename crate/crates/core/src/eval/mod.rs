//! Forecast scoring and experiment analysis.

pub mod ablation;
pub mod holdout;
pub mod metrics;
pub mod plot;
pub mod report;

pub use ablation::{run_arm, run_suite, AblationArm, AblationConfig, ArmRun, ArmSummary};
pub use holdout::{interp_vs_linear, lead_rmse_curve, pooled_normalized_rmse, split_hour};
pub use metrics::{compute_metrics, Metrics};
pub use plot::{plot_artifacts, svg_from_csv, PlotArtifact};
pub use report::{band_coverage, report_csv, window_report, MetricsReport};
