//! Tab-separated report tables.
//!
//! All analysis artifacts (win-rate grids, correlation tables, similarity
//! matrices, sweep curves) share one trivial format: a header line and one
//! row per entry. Floats are printed with `{:?}` so a parsed-back table
//! recovers every value bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{SeraError, SeraResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn check_cell(cell: &str) -> SeraResult<()> {
    if cell.contains(['\t', '\n', '\r']) {
        return Err(SeraError::InvalidArgument(format!(
            "table cell {cell:?} contains a delimiter character"
        )));
    }
    Ok(())
}

impl Table {
    pub fn new(columns: &[&str]) -> SeraResult<Self> {
        if columns.is_empty() {
            return Err(SeraError::InvalidArgument(
                "a table needs at least one column".to_string(),
            ));
        }
        for c in columns {
            check_cell(c)?;
        }
        Ok(Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        })
    }

    /// Shortest decimal form that round-trips the exact value.
    pub fn fmt_f64(x: f64) -> String {
        format!("{x:?}")
    }

    pub fn push_row(&mut self, cells: Vec<String>) -> SeraResult<()> {
        if cells.len() != self.columns.len() {
            return Err(SeraError::InvalidArgument(format!(
                "row has {} cells, table has {} columns",
                cells.len(),
                self.columns.len()
            )));
        }
        for c in &cells {
            check_cell(c)?;
        }
        self.rows.push(cells);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn get(&self, row: usize, column: &str) -> Option<&str> {
        let ix = self.column_index(column)?;
        self.rows.get(row).map(|r| r[ix].as_str())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> SeraResult<Table> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| SeraError::InvalidArgument("empty table text".to_string()))?;
        let columns: Vec<String> = header.split('\t').map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (ix, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cells: Vec<String> = line.split('\t').map(|s| s.to_string()).collect();
            if cells.len() != columns.len() {
                return Err(SeraError::InvalidArgument(format!(
                    "table row {} has {} cells, header has {}",
                    ix + 2,
                    cells.len(),
                    columns.len()
                )));
            }
            rows.push(cells);
        }
        Ok(Table { columns, rows })
    }

    pub fn write(&self, path: &Path) -> SeraResult<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> SeraResult<Table> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }
}
