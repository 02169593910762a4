//! CSV emission: stable schemas, 12 significant digits, '\n' line endings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::{AppError, AppResult};

/// Decimal representation with 12 significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let prec = (11 - exp).max(0) as usize;
    format!("{:.*}", prec, x)
}

pub struct CsvFile {
    writer: BufWriter<File>,
    path: String,
}

impl CsvFile {
    pub fn create(dir: &Path, name: &str, header: &[&str]) -> AppResult<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| {
            AppError::Runtime(format!("cannot create {}: {e}", path.display()))
        })?;
        let mut out = CsvFile { writer: BufWriter::new(file), path: path.display().to_string() };
        out.raw_line(&header.join(","))?;
        Ok(out)
    }

    fn raw_line(&mut self, line: &str) -> AppResult<()> {
        writeln!(self.writer, "{line}")
            .map_err(|e| AppError::Runtime(format!("write to {}: {e}", self.path)))
    }

    /// One row of already-formatted fields.
    pub fn row(&mut self, fields: &[String]) -> AppResult<()> {
        self.raw_line(&fields.join(","))
    }

    /// One row of numbers, formatted to 12 significant digits.
    pub fn num_row(&mut self, values: &[f64]) -> AppResult<()> {
        let fields: Vec<String> = values.iter().map(|&v| fmt_sig(v)).collect();
        self.row(&fields)
    }

    pub fn finish(mut self) -> AppResult<()> {
        self.writer
            .flush()
            .map_err(|e| AppError::Runtime(format!("flush {}: {e}", self.path)))
    }
}
