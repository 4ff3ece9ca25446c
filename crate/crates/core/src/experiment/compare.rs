//! Merges metric reports into one table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{parse_cell, CompareConfig};
use super::run::REPORT_JSON;
use crate::metrics::MetricReport;
use crate::util::write_file;
use crate::{CoreError, Result};

pub const COMPARE_MD: &str = "compare.md";
pub const COMPARE_CSV: &str = "compare.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    /// Parallel to [`ComparisonTable::columns`]; `None` when the report lacks the cell.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub data_hash: String,
    pub sort_by: String,
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn cell(report: &MetricReport, spec: &str) -> Option<f64> {
    let (m, g) = parse_cell(spec);
    report.value(&m, &g)
}

/// Rows sorted by `sort_by` descending, then by model name. Reports must
/// share a data hash.
pub fn compare_reports(cfg: &CompareConfig, reports: &[(String, MetricReport)]) -> Result<ComparisonTable> {
    let Some((_, first)) = reports.first() else {
        return Err(CoreError::Config("nothing to compare".into()));
    };
    let hash = &first.meta.data_hash;
    if reports.iter().any(|(_, r)| &r.meta.data_hash != hash) {
        let diff: String = reports
            .iter()
            .map(|(src, r)| format!("\n  {} {src}: data {}", r.meta.model, r.meta.data_hash))
            .collect();
        return Err(CoreError::Validation(format!(
            "reports were computed on different data:{diff}"
        )));
    }
    let mut rows: Vec<(Option<f64>, ComparisonRow)> = reports
        .iter()
        .map(|(_, r)| {
            (
                cell(r, &cfg.sort_by),
                ComparisonRow {
                    model: r.meta.model.clone(),
                    values: cfg.columns.iter().map(|c| cell(r, c)).collect(),
                },
            )
        })
        .collect();
    rows.sort_by(|(a, ra), (b, rb)| {
        let key = |v: &Option<f64>| v.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| ra.model.cmp(&rb.model))
    });
    Ok(ComparisonTable {
        data_hash: hash.clone(),
        sort_by: cfg.sort_by.clone(),
        columns: cfg.columns.clone(),
        rows: rows.into_iter().map(|(_, r)| r).collect(),
    })
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl ComparisonTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("data `{}`, sorted by `{}`\n\n| model |", self.data_hash, self.sort_by);
        for c in &self.columns {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.columns.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.model);
            for v in &r.values {
                let _ = write!(s, " {} |", fmt_value(*v));
            }
            s.push('\n');
        }
        s
    }

    /// Full-precision values; missing cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for c in &self.columns {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.model);
            for v in &r.values {
                s.push(',');
                if let Some(x) = v {
                    let _ = write!(s, "{x}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn value(&self, model: &str, column: &str) -> Option<f64> {
        let k = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|r| r.model == model)?.values[k]
    }
}

/// Accepts a report file or a directory holding `report.json`.
pub fn read_report(path: &Path) -> Result<MetricReport> {
    let file: PathBuf = if path.is_dir() { path.join(REPORT_JSON) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| CoreError::io(&file, e))?;
    MetricReport::from_json(&text)
}

/// Reads the reports, writes `compare.md` and `compare.csv` into `out_dir`.
pub fn cmd_compare(cfg: &CompareConfig, inputs: &[PathBuf], out_dir: &Path) -> Result<ComparisonTable> {
    let reports = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), read_report(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_reports(cfg, &reports)?;
    write_file(&out_dir.join(COMPARE_MD), table.to_markdown().as_bytes())?;
    write_file(&out_dir.join(COMPARE_CSV), table.to_csv().as_bytes())?;
    Ok(table)
}
