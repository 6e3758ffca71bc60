//! The `analyze` report: per-input metrics and optional paired comparisons.

use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use scopenav_core::geometry::{analyze_points, pct_change, read_trajectory};
use scopenav_core::{Frame, TrajectoryMetrics};
use scopenav_live::session::{analyze_session, MANIFEST_FILE};
use serde::Serialize;

pub const HULL_ROW: &str = "Convex Hull Volume";
pub const DISTANCE_ROW: &str = "Total Distance Traveled";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub input: String,
    /// `session` for an exported session directory, `trajectory` for a CSV.
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<Frame>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TrajectoryMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub metric: &'static str,
    pub baseline: Option<f64>,
    pub treatment: Option<f64>,
    pub pct_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairEntry {
    pub baseline: String,
    pub treatment: String,
    pub rows: Vec<PairRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub threshold: f64,
    pub files: Vec<FileEntry>,
    pub pairs: Vec<PairEntry>,
}

impl Report {
    pub fn failed(&self) -> impl Iterator<Item = &FileEntry> {
        self.files.iter().filter(|f| f.error.is_some())
    }
}

/// One input: a session directory (has a manifest) or a trajectory CSV.
pub fn analyze_input(input: &str, threshold: f64) -> FileEntry {
    let path = Path::new(input);
    if path.join(MANIFEST_FILE).is_file() {
        return match analyze_session(path, Some(threshold)) {
            Ok(a) => FileEntry {
                input: input.to_string(),
                kind: "session",
                frame: Some(a.frame),
                metrics: Some(a.metrics),
                error: None,
            },
            Err(e) => FileEntry {
                input: input.to_string(),
                kind: "session",
                frame: None,
                metrics: None,
                error: Some(e.to_string()),
            },
        };
    }
    let result = File::open(path)
        .map_err(|e| format!("{input}: {e}"))
        .and_then(|f| read_trajectory(f, Frame::Tracker).map_err(|e| format!("{input}: {e}")));
    match result {
        Ok(t) => FileEntry {
            input: input.to_string(),
            kind: "trajectory",
            frame: None,
            metrics: Some(analyze_points(&t.positions(), threshold)),
            error: None,
        },
        Err(e) => FileEntry {
            input: input.to_string(),
            kind: "trajectory",
            frame: None,
            metrics: None,
            error: Some(e),
        },
    }
}

fn pair_row(metric: &'static str, a: Option<f64>, b: Option<f64>) -> PairRow {
    let pct = match (a, b) {
        (Some(a), Some(b)) => pct_change(a, b).ok(),
        _ => None,
    };
    PairRow {
        metric,
        baseline: a,
        treatment: b,
        pct_change: pct,
    }
}

/// `pairs` hold indices into `files`.
pub fn build_report(threshold: f64, files: Vec<FileEntry>, pairs: &[(usize, usize)]) -> Report {
    let pairs = pairs
        .iter()
        .map(|&(a, b)| {
            let (fa, fb) = (&files[a], &files[b]);
            let get = |f: &FileEntry, pick: fn(&TrajectoryMetrics) -> Option<f64>| f.metrics.as_ref().and_then(pick);
            PairEntry {
                baseline: fa.input.clone(),
                treatment: fb.input.clone(),
                rows: vec![
                    pair_row(HULL_ROW, get(fa, |m| m.hull_volume_mm3), get(fb, |m| m.hull_volume_mm3)),
                    pair_row(DISTANCE_ROW, get(fa, |m| m.path_length_mm), get(fb, |m| m.path_length_mm)),
                ],
            }
        })
        .collect();
    Report {
        threshold,
        files,
        pairs,
    }
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map(|v| format!("{v:.decimals$}")).unwrap_or_else(|| "-".into())
}

/// Aligned plain-text table; absent values print as `-`.
pub fn format_table(report: &Report) -> String {
    let mut out = String::new();
    let width = report.files.iter().map(|f| f.input.len()).max().unwrap_or(0).max(5);
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>8}  {:>9}  {:>26}  {:>29}",
        "input", "samples", "inliers", "outlier %", "Convex Hull Volume (mm^3)", "Total Distance Traveled (mm)"
    );
    for f in &report.files {
        match (&f.metrics, &f.error) {
            (Some(m), _) => {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>8}  {:>8}  {:>9}  {:>26}  {:>29}",
                    f.input,
                    m.n_samples,
                    m.n_inliers,
                    cell(m.outlier_fraction.map(|x| 100.0 * x), 2),
                    cell(m.hull_volume_mm3, 2),
                    cell(m.path_length_mm, 2),
                );
            }
            (None, e) => {
                let _ = writeln!(out, "{:<width$}  error: {}", f.input, e.as_deref().unwrap_or("no result"));
            }
        }
    }
    for p in &report.pairs {
        let _ = writeln!(out);
        let _ = writeln!(out, "baseline:  {}", p.baseline);
        let _ = writeln!(out, "treatment: {}", p.treatment);
        let _ = writeln!(out, "{:<24}  {:>12}  {:>12}  {:>9}", "", "baseline", "treatment", "% change");
        for r in &p.rows {
            let pct = r.pct_change.map(|v| format!("{v:+.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<24}  {:>12}  {:>12}  {:>9}",
                r.metric,
                cell(r.baseline, 2),
                cell(r.treatment, 2),
                pct
            );
        }
    }
    out
}

pub fn format_machine(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
