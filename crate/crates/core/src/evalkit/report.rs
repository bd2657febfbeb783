//! Results file (JSON) and fixed-width summary table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::FprMode;
use super::robustness::{RobustnessSpec, SettingResult};
use crate::error::{Error, Result};
use crate::verifier::CalibrationResult;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub target_artist_id: String,
    pub fpr_target: f64,
    pub fpr_mode: FprMode,
    pub radius: Option<f64>,
    pub robustness: Option<RobustnessSpec>,
    pub rows: Vec<SettingResult>,
    pub calibration: Option<CalibrationResult>,
}

impl EvaluationReport {
    pub fn new(target_artist_id: impl Into<String>, fpr_target: f64, fpr_mode: FprMode) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            target_artist_id: target_artist_id.into(),
            fpr_target,
            fpr_mode,
            radius: None,
            robustness: None,
            rows: Vec::new(),
            calibration: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::CheckpointVersion {
                found: report.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(report)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table: one row per setting, columns in fixed order.
pub fn render_table(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "target artist: {}", report.target_artist_id);
    match report.radius {
        Some(r) => {
            let _ = writeln!(out, "radius: {r:.6}");
        }
        None => out.push_str("radius: -\n"),
    }
    if let Some(spec) = &report.robustness {
        let _ = writeln!(
            out,
            "robustness: rotation {}deg, jpeg q{}, blur {}x{} sigma {}, hue jitter {}, contrast x{}",
            spec.rotation_degrees,
            spec.jpeg_quality,
            spec.gaussian_blur_kernel,
            spec.gaussian_blur_kernel,
            spec.gaussian_blur_sigma,
            spec.color_jitter_hue,
            spec.contrast_factor
        );
    }
    let tpr_header = format!("TPR@FPR={:e}", report.fpr_target);
    let width = report.rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(7);
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>14}  {:>6}  {:>6}  status",
        "setting", "AUC", tpr_header, "#pos", "#neg"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 56));
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>14}  {:>6}  {:>6}  {}",
            row.setting,
            fmt_metric(row.auc),
            fmt_metric(row.tpr_at_fpr),
            row.n_positive,
            row.n_negative,
            row.status
        );
    }
    out
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`, returning both paths.
pub fn emit_report(report: &EvaluationReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    if report.rows.is_empty() {
        return Err(Error::Precondition("report has no result rows".into()));
    }
    let json = report.to_json()?;
    let table = render_table(report);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let txt_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&txt_path, table).map_err(|e| Error::io(&txt_path, e))?;
    Ok((json_path, txt_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, auc: f64) -> SettingResult {
        SettingResult {
            setting: name.into(),
            auc: Some(auc),
            tpr_at_fpr: Some(0.5),
            n_positive: 20,
            n_negative: 20,
            status: "ok".into(),
        }
    }

    #[test]
    fn two_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = EvaluationReport::new("artist", 1e-2, FprMode::Conservative);
        report.rows = vec![row("clean", 0.987_654_321), row("jpeg q50", 0.9)];
        report.robustness = Some(RobustnessSpec::default());
        let (json, txt) = emit_report(&report, dir.path(), "report").unwrap();
        assert_eq!(EvaluationReport::load(&json).unwrap(), report);
        let table = std::fs::read_to_string(txt).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        let header = lines.iter().position(|l| l.starts_with("setting")).unwrap();
        assert!(lines[header + 2].starts_with("clean"));
        assert!(lines[header + 3].starts_with("jpeg q50"));
        assert_eq!(lines.len(), header + 4);
    }

    #[test]
    fn empty_report_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let report = EvaluationReport::new("artist", 1e-2, FprMode::Conservative);
        assert!(emit_report(&report, dir.path(), "report").is_err());
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, "x").unwrap();
        let mut report = EvaluationReport::new("artist", 1e-2, FprMode::Conservative);
        report.rows = vec![row("clean", 1.0)];
        assert!(matches!(emit_report(&report, &file.join("sub"), "r"), Err(Error::Io { .. })));
    }
}
