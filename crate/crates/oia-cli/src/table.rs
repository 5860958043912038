//! Flat CSV tables and their markdown rendering.
//!
//! Cells never contain commas (numbers, names, and "m±s" aggregates), so the
//! format needs no quoting; the parser reports 1-based line numbers.

use oia_core::metrics::MetricsBundle;
use oia_core::{OiaError, Result};

/// Fixed report column order used by `eval` and `ablate`.
pub const REPORT_COLUMNS: [&str; 12] = [
    "name",
    "lambda",
    "k",
    "f1_F",
    "f1_S",
    "f1_L",
    "f1_R",
    "action_mF1",
    "action_F1all",
    "expl_mF1",
    "expl_F1all",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(OiaError::Invalid(format!(
                "row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse a CSV produced by [`Table::to_csv`]. Empty input yields an
    /// empty table; rows must match the header arity.
    pub fn parse_csv(source: &str, text: &str) -> Result<Table> {
        let mut lines = text.lines().enumerate();
        let header: Vec<String> = match lines.next() {
            Some((_, line)) => line.split(',').map(str::to_string).collect(),
            None => return Ok(Table::new(Vec::<String>::new())),
        };
        let mut table = Table::new(header);
        for (idx, line) in lines {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != table.header.len() {
                return Err(OiaError::Parse {
                    path: source.to_string(),
                    line: idx + 1,
                    msg: format!(
                        "expected {} columns, got {}",
                        table.header.len(),
                        row.len()
                    ),
                });
            }
            table.rows.push(row);
        }
        Ok(table)
    }

    /// Render as a pipe table; cell text is carried over verbatim.
    pub fn to_markdown(&self) -> String {
        if self.header.is_empty() {
            return String::new();
        }
        let mut out = format!("| {} |\n", self.header.join(" | "));
        out.push_str(&format!(
            "|{}\n",
            " --- |".repeat(self.header.len())
        ));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }
}

pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// The eight metric cells of a report row in column order, with the cells a
/// given lambda leaves untrained shown as "-": explanation columns at
/// lambda = 0, action columns at lambda = inf.
pub fn metric_cells(m: &MetricsBundle, lambda: f64) -> Vec<String> {
    let action_trained = !lambda.is_infinite();
    let expl_trained = lambda != 0.0;
    let mask = |trained: bool, v: f64| if trained { fmt4(v) } else { "-".to_string() };
    let mut cells: Vec<String> = m
        .per_action_f1
        .iter()
        .map(|&v| mask(action_trained, v))
        .collect();
    cells.push(mask(action_trained, m.action_mf1));
    cells.push(mask(action_trained, m.action_f1_all));
    cells.push(mask(expl_trained, m.expl_mf1));
    cells.push(mask(expl_trained, m.expl_f1_all));
    cells
}

/// Mean and sample standard deviation (n-1 denominator; 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
