//! Machine-readable reports: verification JSON/CSV, bounds-cache dumps, and
//! bound-gap audit CSVs. All output is deterministic for fixed inputs;
//! floats print as the shortest decimal that round-trips the exact value.

use crate::bounds::BoundsCache;
use crate::error::{CapmError, Result};
use crate::oracle::GapReport;
use crate::verifier::VerificationReport;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    /// Slope strategy the run used.
    pub alpha: String,
    #[serde(flatten)]
    pub report: VerificationReport,
}

/// Write the JSON report. An empty dataset is an error and writes nothing.
pub fn write_report(path: &Path, report: &VerificationReport, alpha: &str) -> Result<()> {
    if report.images.is_empty() {
        return Err(CapmError::EmptyDataset);
    }
    let file = ReportFile {
        schema_version: SCHEMA_VERSION,
        alpha: alpha.to_string(),
        report: report.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CapmError::ParseError(e.to_string()))
}

/// Write the per-image CSV companion.
pub fn write_report_csv(path: &Path, report: &VerificationReport) -> Result<()> {
    if report.images.is_empty() {
        return Err(CapmError::EmptyDataset);
    }
    let mut out = Vec::new();
    writeln!(out, "image_index,label,predicted,verdict,min_margin,time_ms")?;
    for r in &report.images {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.index,
            r.label,
            r.predicted,
            r.verdict.label(),
            r.min_margin.map(|m| m.to_string()).unwrap_or_default(),
            r.time_ms
        )?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Dump a bounds cache as CSV, one row per cached interval. Maxpool rows use
/// `neuron = pixel * slots + slot` (running rows have slots + 1 per pixel).
pub fn write_bounds_csv(path: &Path, cache: &BoundsCache) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "operation,layer,neuron,lower,upper,cluster")?;
    for (i, b) in cache.conv_preact.iter().enumerate() {
        for j in 0..b.len() {
            writeln!(
                out,
                "conv_preact,{i},{j},{},{},{}",
                b.lower[j],
                b.upper[j],
                cache.conv_clusters[i][j].label()
            )?;
        }
    }
    for (i, b) in cache.post_relu.iter().enumerate() {
        for j in 0..b.len() {
            writeln!(out, "post_relu,{i},{j},{},{},", b.lower[j], b.upper[j])?;
        }
    }
    for (i, mp) in cache.maxpool.iter().enumerate() {
        for j in 0..mp.running_lower.len() {
            writeln!(
                out,
                "maxpool_running,{i},{j},{},{},",
                mp.running_lower[j], mp.running_upper[j]
            )?;
        }
        for j in 0..mp.diff_lower.len() {
            writeln!(
                out,
                "maxpool_diff,{i},{j},{},{},{}",
                mp.diff_lower[j],
                mp.diff_upper[j],
                mp.clusters[j].label()
            )?;
        }
    }
    for (i, b) in cache.fc_preact.iter().enumerate() {
        for j in 0..b.len() {
            writeln!(
                out,
                "fc_preact,{i},{j},{},{},{}",
                b.lower[j],
                b.upper[j],
                cache.fc_clusters[i][j].label()
            )?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write the bound-gap audit CSV, one row per neuron.
pub fn write_gaps_csv(path: &Path, report: &GapReport) -> Result<()> {
    let mut out = Vec::new();
    writeln!(
        out,
        "operation,layer,neuron,predicted_lower,predicted_upper,empirical_lower,empirical_upper,gap_predicted,gap_empirical,gap_difference,violation"
    )?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.operation,
            r.layer,
            r.neuron,
            r.predicted_lower,
            r.predicted_upper,
            r.empirical_lower,
            r.empirical_upper,
            r.gap_predicted,
            r.gap_empirical,
            r.gap_difference,
            r.violation
        )?;
    }
    fs::write(path, out)?;
    Ok(())
}
