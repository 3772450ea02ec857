//! CSV and JSON writers for metric results.

use std::fmt::Write;
use std::path::Path;

use super::metrics::MetricReport;
use super::visibility::VisibilityPr;
use crate::error::{Error, Result};
use crate::util::atomic_write;

/// `keypoint,rate,correct,counted`; an empty rate means nothing was counted.
pub fn metrics_csv(names: &[String], report: &MetricReport) -> String {
    let mut out = String::from("keypoint,rate,correct,counted\n");
    for (k, name) in names.iter().enumerate() {
        let rate = report.per_keypoint.get(k).copied().flatten().map(|r| format!("{r:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{name},{rate},{},{}", report.correct[k], report.counted[k]);
    }
    let _ = writeln!(out, "overall,{:.6},{},{}", report.overall, report.correct.iter().sum::<usize>(), report.counted.iter().sum::<usize>());
    out
}

/// `threshold,precision,recall`.
pub fn pr_csv(pr: &VisibilityPr) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &pr.curve {
        let _ = writeln!(out, "{},{:.6},{:.6}", p.threshold, p.precision, p.recall);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    atomic_write(path, format!("{text}\n").as_bytes())
}
