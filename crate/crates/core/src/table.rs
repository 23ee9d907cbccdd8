//! Small CSV writer for result tables.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A header plus rows of already formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Writes the table; `preamble` becomes a leading `# ...` line.
    pub fn write(&self, path: &Path, preamble: Option<&str>) -> Result<()> {
        let io = |e: std::io::Error| Error::io(path, e);
        let mut file = File::create(path).map_err(io)?;
        if let Some(p) = preamble {
            writeln!(file, "# {p}").map_err(io)?;
        }
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(io)
    }
}

/// Shortest round-trip decimal form.
pub fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}
