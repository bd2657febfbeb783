//! Evaluation: ranking metrics, the robustness battery and reports.

mod metrics;
mod report;
mod robustness;

pub use metrics::{roc_auc, tpr_at_fpr, tpr_at_fpr_with, FprMode, ScoreSet};
pub use report::{emit_report, render_table, EvaluationReport, REPORT_SCHEMA_VERSION};
pub use robustness::{robustness_battery, score_images, LabeledImage, Perturbation, RobustnessSpec, SettingResult};
