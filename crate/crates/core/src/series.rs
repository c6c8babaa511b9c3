//! Chronological multivariate process records and their delimited-text form.

use std::path::Path;

use crate::error::{io_error, Error, Result};

/// Row-major table of process readings, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSeries {
    columns: Vec<String>,
    data: Vec<f64>,
}

impl ProcessSeries {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            data: Vec::new(),
        }
    }

    pub fn from_rows(columns: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut s = Self::new(columns);
        for r in rows {
            s.push_row(r)?;
        }
        Ok(s)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Dimension {
                what: "series row",
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!(
                "missing or non-finite value in column {}",
                self.columns[i]
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.data.len() / self.columns.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.columns.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Dataset(format!("no column named {name}")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name)?;
        Ok((0..self.n_rows()).map(|i| self.row(i)[j]).collect())
    }

    /// Row-major matrix of the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Vec<f64>> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.column_index(n))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.n_rows() * idx.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_error(path))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&self.columns)?;
        for i in 0..self.n_rows() {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(io_error(path))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_error(path))?;
        let mut r = csv::Reader::from_reader(file);
        let columns: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        let mut s = Self::new(columns);
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row: Vec<f64> = rec
                .iter()
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::Dataset(format!("row {}: cannot parse {f:?}", line + 1))
                    })
                })
                .collect::<Result<_>>()?;
            s.push_row(&row)?;
        }
        Ok(s)
    }
}
