//! Column-aligned differences between the CSV outputs of two runs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lowrank_kbp::io::{read_csv, CsvTable};
use walkdir::WalkDir;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDiff {
    pub file: PathBuf,
    pub column: String,
    pub max_abs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareReport {
    pub diffs: Vec<ColumnDiff>,
    /// Files found under only one of the two runs.
    pub unmatched: Vec<PathBuf>,
    /// `file: column` present on only one side.
    pub skipped_columns: Vec<String>,
}

impl CompareReport {
    pub fn max_abs(&self) -> f64 {
        self.diffs.iter().map(|d| d.max_abs).fold(0.0, f64::max)
    }

    pub fn beyond(&self, tol: f64) -> Vec<&ColumnDiff> {
        self.diffs.iter().filter(|d| !(d.max_abs <= tol)).collect()
    }
}

fn csv_files(root: &Path) -> Result<BTreeSet<PathBuf>> {
    let mut out = BTreeSet::new();
    for entry in WalkDir::new(root) {
        let entry = entry.map_err(|e| CliError::Usage(format!("{}: {e}", root.display())))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e == "csv") {
            out.insert(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(out)
}

/// Compares every CSV file present under both run directories. Columns are
/// matched by name; the leading `t` column must agree exactly.
pub fn compare_runs(a: &Path, b: &Path) -> Result<CompareReport> {
    for dir in [a, b] {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
        }
    }
    let fa = csv_files(a)?;
    let fb = csv_files(b)?;
    let mut report = CompareReport {
        unmatched: fa.symmetric_difference(&fb).cloned().collect(),
        ..Default::default()
    };
    for rel in fa.intersection(&fb) {
        let ta = read_csv(a.join(rel))?;
        let tb = read_csv(b.join(rel))?;
        compare_tables(rel, &ta, &tb, &mut report)?;
    }
    if report.diffs.is_empty() {
        return Err(CliError::SchemaMismatch("the runs share no comparable columns".into()));
    }
    Ok(report)
}

fn compare_tables(rel: &Path, a: &CsvTable, b: &CsvTable, report: &mut CompareReport) -> Result<()> {
    let show = rel.display();
    if a.rows.len() != b.rows.len() {
        return Err(CliError::SchemaMismatch(format!("{show}: {} rows vs {}", a.rows.len(), b.rows.len())));
    }
    let ta = a.header.iter().position(|h| h == "t");
    let tb = b.header.iter().position(|h| h == "t");
    if let (Some(i), Some(j)) = (ta, tb) {
        if a.rows.iter().zip(&b.rows).any(|(ra, rb)| ra[i] != rb[j]) {
            return Err(CliError::SchemaMismatch(format!("{show}: time stamps differ")));
        }
    }
    for (i, name) in a.header.iter().enumerate() {
        if name == "t" {
            continue;
        }
        let Some(j) = b.header.iter().position(|h| h == name) else {
            report.skipped_columns.push(format!("{show}: {name}"));
            continue;
        };
        let max_abs = a
            .rows
            .iter()
            .zip(&b.rows)
            .map(|(ra, rb)| deviation(ra[i], rb[j]))
            .fold(0.0, f64::max);
        report.diffs.push(ColumnDiff { file: rel.to_path_buf(), column: name.clone(), max_abs });
    }
    for name in &b.header {
        if name != "t" && !a.header.contains(name) {
            report.skipped_columns.push(format!("{show}: {name}"));
        }
    }
    Ok(())
}

/// Matching NaNs agree; a NaN against a number is an infinite deviation.
fn deviation(x: f64, y: f64) -> f64 {
    match (x.is_nan(), y.is_nan()) {
        (true, true) => 0.0,
        (false, false) if x == y => 0.0,
        (false, false) => (x - y).abs(),
        _ => f64::INFINITY,
    }
}
