//! Comparison tables over aggregated runs, as text and JSON.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::AggregateMetrics;

/// Placeholder for metrics that do not exist (e.g. MLU without converged runs).
pub const ABSENT: &str = "\u{2212}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub env: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub architecture: String,
    pub n_runs: usize,
    /// One cell per column; `None` renders as [`ABSENT`].
    pub cells: Vec<Option<f64>>,
}

/// Routing tables show CR and one MLU column per bottleneck; junction tables show FR.
pub fn build_table(aggs: &[AggregateMetrics]) -> Table {
    let env = aggs.first().map(|a| a.env.clone()).unwrap_or_default();
    let routing = aggs.iter().all(|a| a.fr.is_none());
    let width = aggs.iter().filter_map(|a| a.mlu.as_ref().map(Vec::len)).max().unwrap_or(0);
    let columns = if routing {
        std::iter::once("CR".to_string()).chain((1..=width).map(|i| format!("MLU{i}"))).collect()
    } else {
        vec!["FR".to_string()]
    };
    let rows = aggs
        .iter()
        .map(|a| TableRow {
            architecture: a.architecture.name().to_string(),
            n_runs: a.n_runs,
            cells: if routing {
                std::iter::once(Some(a.cr))
                    .chain((0..width).map(|i| a.mlu.as_ref().and_then(|m| m.get(i).copied())))
                    .collect()
            } else {
                vec![a.fr]
            },
        })
        .collect();
    Table { env, columns, rows }
}

fn cell(v: Option<f64>, column: &str) -> String {
    match v {
        None => ABSENT.to_string(),
        Some(x) if column == "FR" => format!("{:.2}%", 100.0 * x),
        Some(x) if column == "CR" => format!("{x:.3}"),
        Some(x) => format!("{x:.3}"),
    }
}

pub fn render_text(table: &Table) -> String {
    let mut header = vec!["Architecture".to_string(), "runs".to_string()];
    header.extend(table.columns.iter().cloned());
    let body: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.architecture.clone(), r.n_runs.to_string()];
            v.extend(r.cells.iter().zip(&table.columns).map(|(c, col)| cell(*c, col)));
            v
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|j| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[j].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |row: &[String]| {
        row.iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (s, w))| {
                let pad = w - s.chars().count();
                if j == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = format!("{}\n", table.env);
    out.push_str(&line(&header));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// Text rendering plus the JSON form of the same table.
pub fn render_tables(aggs: &[AggregateMetrics]) -> Result<(String, String)> {
    let t = build_table(aggs);
    Ok((render_text(&t), serde_json::to_string_pretty(&t)?))
}

pub fn parse_table_json(text: &str) -> Result<Table> {
    Ok(serde_json::from_str(text)?)
}
