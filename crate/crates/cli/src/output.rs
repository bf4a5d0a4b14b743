//! File output helpers and table projections of metric reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use cap_core::MetricsReport;

/// Write `bytes` to a temp file beside `path`, then rename over it, so
/// readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn to_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r)?;
    }
    if reports.is_empty() {
        w.write_record(MetricsReport::COLUMNS)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn from_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    anyhow::ensure!(
        header.iter().map(String::as_str).eq(MetricsReport::COLUMNS),
        "unexpected table header {header:?}"
    );
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn cell(x: f64) -> String {
    format!("{x:.4}")
}

pub fn to_markdown(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", MetricsReport::COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(MetricsReport::COLUMNS.len()));
    for r in reports {
        let row = [
            r.method.clone(),
            r.dataset.clone(),
            r.n.to_string(),
            cell(r.accuracy),
            cell(r.coverage),
            cell(r.avg_set_size),
            cell(r.abstention_rate),
            r.auroc.map_or_else(|| "n/a".to_owned(), cell),
            cell(r.auarc),
            cell(r.ece),
        ];
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}
