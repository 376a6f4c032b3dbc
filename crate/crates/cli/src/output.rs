//! CSV and JSON artifacts.

use std::fs::File;
use std::path::{Path, PathBuf};

use csv::{Terminator, Writer, WriterBuilder};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot create {path}: {source}")]
    Create { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("cannot write {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// 17 significant digits: enough to round-trip every `f64`.
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Writes rows into one CSV file in the run directory.
pub struct Table {
    path: PathBuf,
    writer: Writer<File>,
}

impl Table {
    pub fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, OutputError> {
        let path = dir.join(name);
        let writer = WriterBuilder::new()
            .terminator(Terminator::Any(b'\n'))
            .from_path(&path)
            .map_err(|source| OutputError::Csv { path: path.clone(), source })?;
        let mut table = Self { path, writer };
        table.row(header.iter().map(|h| h.to_string()))?;
        Ok(table)
    }

    pub fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<(), OutputError> {
        let fields: Vec<String> = fields.into_iter().collect();
        self.writer
            .write_record(&fields)
            .map_err(|source| OutputError::Csv { path: self.path.clone(), source })
    }

    pub fn floats(&mut self, values: &[f64]) -> Result<(), OutputError> {
        self.row(values.iter().map(|&v| fmt(v)))
    }

    pub fn finish(mut self) -> Result<PathBuf, OutputError> {
        self.writer
            .flush()
            .map_err(|source| OutputError::Csv { path: self.path.clone(), source: source.into() })?;
        Ok(self.path)
    }
}

pub fn create_dir(dir: &Path) -> Result<(), OutputError> {
    std::fs::create_dir_all(dir).map_err(|source| OutputError::Create { path: dir.to_path_buf(), source })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), OutputError> {
    let file = File::create(path).map_err(|source| OutputError::Create { path: path.to_path_buf(), source })?;
    serde_json::to_writer_pretty(file, value).map_err(|source| OutputError::Json { path: path.to_path_buf(), source })
}
