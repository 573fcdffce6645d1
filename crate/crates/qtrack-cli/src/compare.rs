//! Comparison tables across run reports.
//!
//! Emits one CSV row per report (iterations, final objective, pathlength,
//! tracking error) followed by summary mean/variance rows over the numeric
//! columns. Reports from different physical systems are flagged per row,
//! not rejected.

use anyhow::{bail, Context, Result};
use std::path::Path;

use crate::runner::RunReport;

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.12e}")
    } else {
        String::new()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

/// Build the comparison CSV from report.json paths. Missing or unreadable
/// files are listed per path on stderr and skipped; at least two readable
/// reports are required.
pub fn compare(paths: &[std::path::PathBuf]) -> Result<String> {
    let mut reports: Vec<(String, RunReport)> = Vec::new();
    let mut errors: Vec<String> = Vec::new();
    for path in paths {
        match read_report(path) {
            Ok(report) => reports.push((path.display().to_string(), report)),
            Err(e) => errors.push(format!("{}: {e}", path.display())),
        }
    }
    for e in &errors {
        eprintln!("skipping report {e}");
    }
    if reports.len() < 2 {
        bail!(
            "need at least two readable reports to compare, got {} ({} failed)",
            reports.len(),
            errors.len()
        );
    }

    let reference = reports[0].1.system_fingerprint.clone();
    let mut out = String::from(
        "path,algorithm,iterations,final_phi,phi_max,pathlength,final_track_err,final_fluence,stop_reason,system_mismatch\n",
    );
    for (path, r) in &reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            path,
            r.algorithm,
            r.iterations,
            fmt(r.final_phi),
            fmt(r.phi_max),
            fmt(r.pathlength),
            fmt_opt(r.final_track_err),
            fmt(r.final_fluence),
            r.stop_reason,
            r.system_fingerprint != reference,
        ));
    }

    let columns: [(&str, Box<dyn Fn(&RunReport) -> Option<f64>>); 4] = [
        ("iterations", Box::new(|r| Some(r.iterations as f64))),
        ("final_phi", Box::new(|r| Some(r.final_phi))),
        ("pathlength", Box::new(|r| Some(r.pathlength))),
        ("final_track_err", Box::new(|r| r.final_track_err)),
    ];
    for (name, get) in &columns {
        let values: Vec<f64> = reports.iter().filter_map(|(_, r)| get(r)).collect();
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        out.push_str(&format!("mean_{name},,,{},,,,,,\n", fmt(mean)));
        out.push_str(&format!("variance_{name},,,{},,,,,,\n", fmt(var)));
    }
    Ok(out)
}

fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)
        .with_context(|| "cannot read file".to_string())?;
    serde_json::from_str(&text).with_context(|| "cannot parse report".to_string())
}
