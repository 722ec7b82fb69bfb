//! Result tables and report bundles built from evaluated runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{paired_t_test, percent_increase_report, percent_rows_csv, percent_rows_svg, MetricReport, PercentRow};
use crate::groups::Tier;

/// One table cell: a group (or overall) mean for one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableCell {
    pub column: String,
    pub ndcg: f64,
    /// 1 = best in column (bold), 2 = runner-up (underlined).
    pub rank: usize,
    /// Significantly different from the baseline.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub method: String,
    pub cells: Vec<TableCell>,
}

fn columns(report: &MetricReport) -> Vec<(String, Option<Vec<usize>>)> {
    let mut cols = Vec::new();
    for (axis, labels) in &report.user_groups {
        for tier in Tier::ALL {
            let members = labels.iter().enumerate().filter(|(_, t)| **t == tier).map(|(u, _)| u).collect();
            cols.push((tier.label(*axis).to_string(), Some(members)));
        }
    }
    cols.push(("overall".to_string(), None));
    cols
}

/// Group and overall NDCG per method with competition ranks per column and
/// paired t-tests against `baseline`. Rows keep the input order.
pub fn method_table(reports: &[(String, MetricReport)], baseline: &str) -> Result<Vec<TableRow>> {
    let base = &reports
        .iter()
        .find(|(m, _)| m == baseline)
        .ok_or_else(|| Error::Config(format!("baseline `{baseline}` missing from the reports")))?
        .1;
    let cols = columns(base);
    let mut rows: Vec<TableRow> = Vec::with_capacity(reports.len());
    for (method, report) in reports {
        if report.per_user.len() != base.per_user.len() || report.user_groups != base.user_groups {
            return Err(Error::Data(format!("`{method}` was evaluated on different users or groups")));
        }
        let mut cells = Vec::with_capacity(cols.len());
        for (name, members) in &cols {
            let all: Vec<usize>;
            let members = match members {
                Some(m) => m,
                None => {
                    all = (0..report.per_user.len()).collect();
                    &all
                }
            };
            let m: Vec<f64> = members.iter().map(|&u| report.per_user[u]).collect();
            let b: Vec<f64> = members.iter().map(|&u| base.per_user[u]).collect();
            let ndcg = if m.is_empty() { 0.0 } else { m.iter().sum::<f64>() / m.len() as f64 };
            let significant = method != baseline && m.len() >= 2 && paired_t_test(&m, &b)?.significant;
            cells.push(TableCell { column: name.clone(), ndcg, rank: 0, significant });
        }
        rows.push(TableRow { method: method.clone(), cells });
    }
    for c in 0..cols.len() {
        let values: Vec<f64> = rows.iter().map(|r| r.cells[c].ndcg).collect();
        for r in rows.iter_mut() {
            let v = r.cells[c].ndcg;
            r.cells[c].rank = 1 + values.iter().filter(|x| **x > v).count();
        }
    }
    Ok(rows)
}

/// Wide CSV: per column the value (with `*` when significant) and its rank.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("method");
    if let Some(first) = rows.first() {
        for c in &first.cells {
            let _ = write!(out, ",{0},{0}_rank", c.column);
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.method);
        for c in &r.cells {
            let star = if c.significant { "*" } else { "" };
            let _ = write!(out, ",{:.4}{star},{}", c.ndcg, c.rank);
        }
        out.push('\n');
    }
    out
}

/// Files written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub percent_csv: PathBuf,
    pub percent_svg: PathBuf,
    pub rows: Vec<PercentRow>,
}

pub fn write_report(dir: &Path, reports: &[(String, MetricReport)], baseline: &str) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = method_table(reports, baseline)?;
    let map: BTreeMap<String, MetricReport> = reports.iter().cloned().collect();
    if map.len() != reports.len() {
        return Err(Error::Config("duplicate method names in report".into()));
    }
    let mut rows = percent_increase_report(&map, baseline)?;
    let order: Vec<&String> = reports.iter().map(|(m, _)| m).collect();
    rows.sort_by_key(|r| order.iter().position(|m| **m == r.method));
    let files = ReportFiles {
        table: dir.join("table.csv"),
        percent_csv: dir.join("percent_increase.csv"),
        percent_svg: dir.join("percent_increase.svg"),
        rows,
    };
    let write = |p: &Path, s: String| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&files.table, table_csv(&table))?;
    write(&files.percent_csv, percent_rows_csv(&files.rows))?;
    write(&files.percent_svg, percent_rows_svg(&files.rows, baseline))?;
    Ok(files)
}
