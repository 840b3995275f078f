use std::io::Write;

use siri_core::Result;

/// A CSV result set. Columns named in `timing` hold wall-clock measurements
/// and are excluded from reproducibility comparisons, except on rows pushed
/// with [`Table::push_exact`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub timing: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    exact: Vec<bool>,
}

impl Table {
    pub fn new(header: &[&'static str], timing: &[&'static str]) -> Self {
        Table {
            header: header.to_vec(),
            timing: timing.to_vec(),
            rows: Vec::new(),
            exact: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
        self.exact.push(false);
    }

    /// A row whose every column is deterministic.
    pub fn push_exact(&mut self, row: Vec<String>) {
        self.push(row);
        *self.exact.last_mut().unwrap() = true;
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| *h == name)
    }

    /// Rows with timing columns removed.
    pub fn deterministic_rows(&self) -> Vec<Vec<String>> {
        let keep: Vec<usize> = (0..self.header.len())
            .filter(|i| !self.timing.contains(&self.header[*i]))
            .collect();
        self.rows
            .iter()
            .zip(&self.exact)
            .map(|(r, exact)| match exact {
                true => r.clone(),
                false => keep.iter().map(|i| r[*i].clone()).collect(),
            })
            .collect()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| siri_core::Error::Io(e.into());
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}
