//! Trajectory CSV and gnuplot-style column output.

use std::io::{Read, Write};

use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::grid::GridModel;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("unknown column `{name}`; available: {}", available.join(", "))]
    UnknownColumn { name: String, available: Vec<String> },
    #[error("selection is empty")]
    EmptySelection,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named columns with one row of values per trajectory row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// `t`, then angles of every bus, frequencies of inertia buses, and power,
/// inertia and energy of storage buses.
pub fn trajectory_columns(grid: &GridModel) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..grid.n_buses()).map(|b| format!("delta_{b}")));
    cols.extend(grid.inertia_buses().iter().map(|b| format!("omega_{b}")));
    for prefix in ["P_e", "M_e", "E"] {
        cols.extend(grid.storage_buses().iter().map(|b| format!("{prefix}_{b}")));
    }
    cols
}

pub fn trajectory_table(grid: &GridModel, traj: &Trajectory) -> Table {
    let rows = traj
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![r.state.t];
            v.extend(&r.state.angles);
            v.extend(&r.state.omega);
            v.extend(&r.control.power);
            v.extend(&r.control.inertia);
            v.extend(&r.state.energy);
            v
        })
        .collect();
    Table { columns: trajectory_columns(grid), rows }
}

pub fn write_trajectory_csv<W: Write>(grid: &GridModel, traj: &Trajectory, out: W) -> Result<(), ExportError> {
    let table = trajectory_table(grid, traj);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.columns)?;
    for row in &table.rows {
        // `Display` for f64 is the shortest text that parses back to the same value
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Table, ExportError> {
    let mut r = csv::Reader::from_reader(input);
    let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| ExportError::Parse { line: i + 2, message: format!("`{f}`: {e}") })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

/// Resolves a selection against `available`. A trailing `*` matches every
/// column with that prefix, in column order.
pub fn resolve_selection(available: &[String], selection: &[&str]) -> Result<Vec<usize>, ExportError> {
    let mut picked = Vec::new();
    for &name in selection {
        let hits: Vec<usize> = match name.strip_suffix('*') {
            Some(prefix) => (0..available.len()).filter(|&j| available[j].starts_with(prefix)).collect(),
            None => available.iter().position(|c| c == name).into_iter().collect(),
        };
        if hits.is_empty() {
            return Err(ExportError::UnknownColumn { name: name.to_string(), available: available.to_vec() });
        }
        picked.extend(hits);
    }
    if picked.is_empty() {
        return Err(ExportError::EmptySelection);
    }
    Ok(picked)
}

/// Whitespace-separated columns under a `#` header naming them.
pub fn emit_plot_data(grid: &GridModel, traj: &Trajectory, selection: &[&str]) -> Result<String, ExportError> {
    let table = trajectory_table(grid, traj);
    let picked = resolve_selection(&table.columns, selection)?;
    let mut out = String::new();
    if !traj.scenario.is_empty() {
        out.push_str(&format!("# scenario: {}\n", traj.scenario));
    }
    let names: Vec<&str> = picked.iter().map(|&j| table.columns[j].as_str()).collect();
    out.push_str(&format!("# {}\n", names.join(" ")));
    for row in &table.rows {
        let line: Vec<String> = picked.iter().map(|&j| row[j].to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Reads text written by [`emit_plot_data`]; the last `#` line names the columns.
pub fn parse_plot_data(text: &str) -> Result<Table, ExportError> {
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if rows.is_empty() && !comment.contains(':') {
                columns = Some(comment.split_whitespace().map(str::to_string).collect());
            }
            continue;
        }
        let width = columns
            .as_ref()
            .ok_or_else(|| ExportError::Parse { line: i + 1, message: "data before the column header".into() })?
            .len();
        let row = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| ExportError::Parse { line: i + 1, message: format!("`{f}`: {e}") }))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != width {
            return Err(ExportError::Parse {
                line: i + 1,
                message: format!("expected {width} values, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    let columns = columns.ok_or(ExportError::Parse { line: 0, message: "no column header".into() })?;
    Ok(Table { columns, rows })
}
