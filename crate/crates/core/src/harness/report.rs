//! CSV, JSON and text output for benchmark runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::pipeline::{AggregateRow, CellResult, Column};
use crate::error::{Error, Result};

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Serialize)]
struct ResultRow<'a> {
    method: &'a str,
    variant: &'a str,
    direction: &'a str,
    rho_t: f64,
    seed: u64,
    accuracy: f64,
    macro_accuracy: f64,
    prior_l1: f64,
}

/// One row per (method, variant, column, seed) cell.
pub fn results_csv(results: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(ResultRow {
            method: &r.method,
            variant: &r.variant,
            direction: r.direction.label(),
            rho_t: r.rho_t,
            seed: r.seed,
            accuracy: r.metrics.accuracy,
            macro_accuracy: r.metrics.macro_accuracy,
            prior_l1: r.metrics.prior_l1,
        })
        .map_err(csv_error)?;
    }
    finish(w)
}

/// The table layout: method, variant, one column per distribution, Avg.
pub fn aggregate_csv(rows: &[AggregateRow], cols: &[Column]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "variant".to_string()];
    header.extend(cols.iter().map(Column::label));
    header.push("Avg".into());
    w.write_record(&header).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![r.method.clone(), r.variant.clone()];
        rec.extend(r.columns.iter().map(|(_, v)| v.to_string()));
        rec.push(r.avg.to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    finish(w)
}

#[derive(Serialize)]
struct BatchRow<'a> {
    method: &'a str,
    variant: &'a str,
    column: &'a str,
    seed: u64,
    t: usize,
    accuracy: f64,
    loss: Option<f64>,
    prior_l1: f64,
}

pub fn per_batch_csv(results: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        for b in &r.batches {
            w.serialize(BatchRow {
                method: &r.method,
                variant: &r.variant,
                column: &r.column,
                seed: r.seed,
                t: b.t,
                accuracy: b.accuracy,
                loss: b.loss,
                prior_l1: b.prior_l1,
            })
            .map_err(csv_error)?;
        }
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Fixed-width table for the terminal.
pub fn render_table(rows: &[AggregateRow], cols: &[Column]) -> String {
    let name_w = rows
        .iter()
        .map(|r| r.method.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    let var_w = rows.iter().map(|r| r.variant.len()).chain([7]).max().unwrap_or(7);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}  {:<var_w$}", "method", "variant");
    for c in cols {
        let _ = write!(out, " {:>6}", c.label());
    }
    let _ = writeln!(out, " {:>6}", "Avg");
    for r in rows {
        let _ = write!(out, "{:<name_w$}  {:<var_w$}", r.method, r.variant);
        for (_, v) in &r.columns {
            let _ = write!(out, " {v:>6.2}");
        }
        let _ = writeln!(out, " {:>6.2}", r.avg);
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::pipeline::columns;
    use crate::shiftbench::Direction;
    use crate::tta::{BatchRecord, RunMetrics};

    fn cell() -> CellResult {
        CellResult {
            method: "tent".into(),
            variant: "default".into(),
            column: "B10".into(),
            direction: Direction::Backward,
            rho_t: 10.0,
            seed: 2,
            metrics: RunMetrics {
                samples: 4,
                accuracy: 0.75,
                per_class_accuracy: vec![],
                macro_accuracy: 0.5,
                final_prior: vec![],
                prior_l1: 0.125,
            },
            batches: vec![BatchRecord {
                t: 0,
                accuracy: 0.75,
                loss: None,
                prior_l1: 0.125,
            }],
        }
    }

    #[test]
    fn results_header_and_row() {
        let text = results_csv(&[cell()]).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,variant,direction,rho_t,seed,accuracy,macro_accuracy,prior_l1"
        );
        assert_eq!(lines.next().unwrap(), "tent,default,backward,10.0,2,0.75,0.5,0.125");
        assert!(per_batch_csv(&[cell()]).unwrap().lines().nth(1).unwrap().ends_with(",0,0.75,,0.125"));
    }

    #[test]
    fn aggregate_has_seven_columns_and_avg() {
        let cols = columns(&[10.0, 25.0, 50.0]);
        let row = AggregateRow {
            method: "m".into(),
            variant: "default".into(),
            columns: cols.iter().map(|c| (c.label(), 1.0)).collect(),
            avg: 1.0,
        };
        let text = aggregate_csv(&[row], &cols).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,variant,F50,F25,F10,U,B10,B25,B50,Avg");
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 10);
    }
}
