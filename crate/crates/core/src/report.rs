//! Evaluation reports and their tables.
//!
//! A report holds R@K and NG-R@K for K in {20, 50, 100}, per-predicate R@100,
//! and optionally the mean change against a named baseline report. Tables
//! mark the best value of each column in bold and the second-best distinct
//! value underlined (values compared at four decimals, ties share the mark),
//! and flag every cell as better-or-equal (▲) or worse (▼) than the baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::json::to_canonical;
use crate::metrics::RECALL_KS;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("K sets differ: {left:?} vs {right:?}")]
    KSetMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("{metric} = {value} is outside [0, 1]")]
    OutOfRange { metric: String, value: f64 },
    #[error("baseline row {0} does not exist")]
    NoSuchBaseline(usize),
}

/// Raw metric values for one evaluated model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub ng_recall: BTreeMap<usize, f64>,
    /// Predicate name → R@100.
    pub per_predicate: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanDelta {
    pub baseline: String,
    pub recall: f64,
    pub ng_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub recall: BTreeMap<usize, f64>,
    pub ng_recall: BTreeMap<usize, f64>,
    pub per_predicate: BTreeMap<String, f64>,
    pub mean_delta: Option<MeanDelta>,
}

impl EvalReport {
    /// Canonical JSON (sorted keys, four-decimal floats).
    pub fn to_json(&self) -> String {
        to_canonical(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn keys(m: &BTreeMap<usize, f64>) -> Vec<usize> {
    m.keys().copied().collect()
}

fn check_ks(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> Result<(), ReportError> {
    if keys(a) != keys(b) {
        return Err(ReportError::KSetMismatch {
            left: keys(a),
            right: keys(b),
        });
    }
    Ok(())
}

fn mean_diff(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().map(|(k, v)| v - b[k]).sum::<f64>() / a.len() as f64
}

pub fn build_report(
    name: &str,
    metrics: &EvalMetrics,
    baseline: Option<&EvalReport>,
) -> Result<EvalReport, ReportError> {
    check_ks(&metrics.recall, &metrics.ng_recall)?;
    let all = metrics
        .recall
        .iter()
        .map(|(k, v)| (format!("R@{k}"), *v))
        .chain(metrics.ng_recall.iter().map(|(k, v)| (format!("NG-R@{k}"), *v)))
        .chain(metrics.per_predicate.iter().map(|(p, v)| (p.clone(), *v)));
    for (metric, value) in all {
        if !(0.0..=1.0).contains(&value) {
            return Err(ReportError::OutOfRange { metric, value });
        }
    }
    let mean_delta = match baseline {
        Some(b) => {
            check_ks(&metrics.recall, &b.recall)?;
            check_ks(&metrics.ng_recall, &b.ng_recall)?;
            Some(MeanDelta {
                baseline: b.name.clone(),
                recall: mean_diff(&metrics.recall, &b.recall),
                ng_recall: mean_diff(&metrics.ng_recall, &b.ng_recall),
            })
        }
        None => None,
    };
    Ok(EvalReport {
        name: name.to_string(),
        recall: metrics.recall.clone(),
        ng_recall: metrics.ng_recall.clone(),
        per_predicate: metrics.per_predicate.clone(),
        mean_delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    None,
    Best,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flag {
    None,
    BetterOrEqual,
    Worse,
}

fn r4(x: f64) -> i64 {
    (x * 1e4).round() as i64
}

/// Bold/underline assignment for one column.
pub fn column_marks(values: &[Option<f64>]) -> Vec<Mark> {
    let distinct: BTreeSet<i64> = values.iter().flatten().map(|v| r4(*v)).collect();
    let mut top = distinct.iter().rev();
    let best = top.next().copied();
    let second = top.next().copied();
    values
        .iter()
        .map(|v| match v.map(r4) {
            Some(x) if Some(x) == best => Mark::Best,
            Some(x) if Some(x) == second => Mark::Second,
            _ => Mark::None,
        })
        .collect()
}

pub fn flag(value: f64, baseline: f64) -> Flag {
    if r4(value) >= r4(baseline) {
        Flag::BetterOrEqual
    } else {
        Flag::Worse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableStyle {
    Markdown,
    Csv,
}

/// One model row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    /// (cross-attention mask, self-attention mask); `None` for rows without the adapter.
    pub masks: Option<(bool, bool)>,
    pub report: EvalReport,
}

struct Cell {
    value: Option<f64>,
    text: String,
    mark: Mark,
    flag: Flag,
}

fn md_cell(c: &Cell) -> String {
    let t = match c.mark {
        Mark::Best => format!("**{}**", c.text),
        Mark::Second => format!("<u>{}</u>", c.text),
        Mark::None => c.text.clone(),
    };
    match c.flag {
        Flag::BetterOrEqual => format!("{t} ▲"),
        Flag::Worse => format!("{t} ▼"),
        Flag::None => t,
    }
}

fn mark_str(m: Mark) -> &'static str {
    match m {
        Mark::Best => "best",
        Mark::Second => "second",
        Mark::None => "",
    }
}

fn flag_str(f: Flag) -> &'static str {
    match f {
        Flag::BetterOrEqual => "better_or_equal",
        Flag::Worse => "worse",
        Flag::None => "",
    }
}

/// Fills marks for a column of cells.
fn mark_column(cells: &mut [&mut Cell]) {
    let marks = column_marks(&cells.iter().map(|c| c.value).collect::<Vec<_>>());
    for (c, m) in cells.iter_mut().zip(marks) {
        c.mark = m;
    }
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// R@K / NG-R@K table with mean-Δ columns when a baseline row is given.
pub fn render_recall_table(
    rows: &[TableRow],
    baseline: Option<usize>,
    style: TableStyle,
) -> Result<String, ReportError> {
    if let Some(b) = baseline {
        if b >= rows.len() {
            return Err(ReportError::NoSuchBaseline(b));
        }
    }
    let ks: Vec<usize> = match rows.first() {
        Some(r) => keys(&r.report.recall),
        None => RECALL_KS.to_vec(),
    };
    for r in rows {
        check_ks(&rows[0].report.recall, &r.report.recall)?;
        check_ks(&rows[0].report.recall, &r.report.ng_recall)?;
    }
    let with_delta = baseline.is_some();

    // columns: per family, one per K then optionally mean Δ
    let mut headers: Vec<String> = Vec::new();
    for fam in ["R", "NG-R"] {
        headers.extend(ks.iter().map(|k| format!("{fam}@{k}")));
        if with_delta {
            headers.push(format!("{fam} mean Δ"));
        }
    }
    let mut grid: Vec<Vec<Cell>> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut cells = Vec::new();
            for (fam, base_map) in [
                (&row.report.recall, baseline.map(|b| &rows[b].report.recall)),
                (&row.report.ng_recall, baseline.map(|b| &rows[b].report.ng_recall)),
            ] {
                for k in &ks {
                    let v = fam[k];
                    cells.push(Cell {
                        value: Some(v),
                        text: fmt4(v),
                        mark: Mark::None,
                        flag: match base_map {
                            Some(bm) if Some(i) != baseline => flag(v, bm[k]),
                            _ => Flag::None,
                        },
                    });
                }
                if let Some(bm) = base_map {
                    if Some(i) == baseline {
                        cells.push(Cell {
                            value: None,
                            text: "-".into(),
                            mark: Mark::None,
                            flag: Flag::None,
                        });
                    } else {
                        let d = mean_diff(fam, bm);
                        cells.push(Cell {
                            value: Some(d),
                            text: fmt4(d),
                            mark: Mark::None,
                            flag: flag(d, 0.0),
                        });
                    }
                }
            }
            cells
        })
        .collect();
    for col in 0..headers.len() {
        let mut column: Vec<&mut Cell> = grid.iter_mut().map(|r| &mut r[col]).collect();
        mark_column(&mut column);
    }

    let mut out = String::new();
    match style {
        TableStyle::Markdown => {
            let _ = writeln!(
                out,
                "| Model | SG cross-attn mask | Self-attn mask | {} |",
                headers.join(" | ")
            );
            let _ = writeln!(out, "|---|:-:|:-:|{}", "--:|".repeat(headers.len()));
            for (row, cells) in rows.iter().zip(&grid) {
                let (m1, m2) = match row.masks {
                    Some((a, b)) => (tick(a), tick(b)),
                    None => ("-", "-"),
                };
                let body: Vec<String> = cells.iter().map(md_cell).collect();
                let _ = writeln!(out, "| {} | {m1} | {m2} | {} |", row.label, body.join(" | "));
            }
        }
        TableStyle::Csv => {
            out.push_str("model,metric,value,mark,flag\n");
            for (row, cells) in rows.iter().zip(&grid) {
                for (h, c) in headers.iter().zip(cells) {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        csv_field(&row.label),
                        csv_field(h),
                        c.text,
                        mark_str(c.mark),
                        flag_str(c.flag)
                    );
                }
            }
        }
    }
    Ok(out)
}

fn tick(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-predicate R@100: one row per predicate, one column per model.
/// Predicates at zero for every model are omitted; marks run along each row.
pub fn render_predicate_table(
    rows: &[TableRow],
    baseline: Option<usize>,
    style: TableStyle,
) -> Result<String, ReportError> {
    if let Some(b) = baseline {
        if b >= rows.len() {
            return Err(ReportError::NoSuchBaseline(b));
        }
    }
    let predicates: BTreeSet<&String> = rows.iter().flat_map(|r| r.report.per_predicate.keys()).collect();
    let value = |r: &TableRow, p: &str| r.report.per_predicate.get(p).copied().unwrap_or(0.0);
    let mut out = String::new();
    match style {
        TableStyle::Markdown => {
            let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
            let _ = writeln!(out, "| Predicate | {} |", labels.join(" | "));
            let _ = writeln!(out, "|---|{}", "--:|".repeat(rows.len()));
        }
        TableStyle::Csv => out.push_str("predicate,model,value,mark,flag\n"),
    }
    for p in predicates {
        let values: Vec<f64> = rows.iter().map(|r| value(r, p)).collect();
        if values.iter().all(|v| r4(*v) == 0) {
            continue;
        }
        let marks = column_marks(&values.iter().map(|v| Some(*v)).collect::<Vec<_>>());
        let cells: Vec<Cell> = values
            .iter()
            .zip(marks)
            .enumerate()
            .map(|(i, (v, mark))| Cell {
                value: Some(*v),
                text: fmt4(*v),
                mark,
                flag: match baseline {
                    Some(b) if b != i => flag(*v, values[b]),
                    _ => Flag::None,
                },
            })
            .collect();
        match style {
            TableStyle::Markdown => {
                let body: Vec<String> = cells.iter().map(md_cell).collect();
                let _ = writeln!(out, "| {p} | {} |", body.join(" | "));
            }
            TableStyle::Csv => {
                for (row, c) in rows.iter().zip(&cells) {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{}",
                        csv_field(p),
                        csv_field(&row.label),
                        c.text,
                        mark_str(c.mark),
                        flag_str(c.flag)
                    );
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(r: [f64; 3], ng: [f64; 3]) -> EvalMetrics {
        EvalMetrics {
            recall: RECALL_KS.iter().copied().zip(r).collect(),
            ng_recall: RECALL_KS.iter().copied().zip(ng).collect(),
            per_predicate: BTreeMap::new(),
        }
    }

    #[test]
    fn report_against_itself_has_zero_delta() {
        let base = build_report("a", &metrics([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]), None).unwrap();
        let again = build_report("a", &metrics([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]), Some(&base)).unwrap();
        let d = again.mean_delta.unwrap();
        assert_eq!((d.recall, d.ng_recall), (0.0, 0.0));
    }

    #[test]
    fn k_set_mismatch() {
        let base = build_report("a", &metrics([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]), None).unwrap();
        let mut m = metrics([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]);
        m.recall.remove(&100);
        m.ng_recall.remove(&100);
        assert!(matches!(build_report("b", &m, Some(&base)), Err(ReportError::KSetMismatch { .. })));
    }

    #[test]
    fn out_of_range_rejected() {
        let m = metrics([0.1, 1.2, 0.3], [0.2, 0.3, 0.4]);
        assert!(matches!(build_report("b", &m, None), Err(ReportError::OutOfRange { .. })));
    }

    #[test]
    fn marks_share_ties() {
        let m = column_marks(&[Some(0.5), Some(0.50001), Some(0.4), None, Some(0.3)]);
        assert_eq!(m, vec![Mark::Best, Mark::Best, Mark::Second, Mark::None, Mark::None]);
    }

    #[test]
    fn json_round_trip() {
        let mut m = metrics([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]);
        m.per_predicate.insert("left of".into(), 0.25);
        let base = build_report("real", &m, None).unwrap();
        let r = build_report("1", &m, Some(&base)).unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn single_report_without_baseline_is_plain() {
        let r = build_report("only", &metrics([0.1, 0.2, 0.3], [0.2, 0.3, 0.4]), None).unwrap();
        let rows = [TableRow {
            label: "only".into(),
            masks: None,
            report: r,
        }];
        let md = render_recall_table(&rows, None, TableStyle::Markdown).unwrap();
        assert!(!md.contains('▲') && !md.contains('▼') && !md.contains("mean Δ"));
    }
}
