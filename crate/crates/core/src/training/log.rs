use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// One epoch's metrics for one task and split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub loss: f64,
    pub ce: f64,
    pub aux: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Metrics of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRow {
    pub epoch: usize,
    /// 1-based step within the epoch.
    pub batch: usize,
    pub task: String,
    pub loss: f64,
    pub ce: f64,
    pub aux: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// In-memory metric history, optionally mirrored to `<stem>.csv` and
/// `<stem>.jsonl`. Per-step rows go to `<stem>.batches.csv`, created on the
/// first such row.
#[derive(Default)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
    batch_rows: Vec<BatchRow>,
    csv: Option<(csv::Writer<File>, PathBuf)>,
    jsonl: Option<(BufWriter<File>, PathBuf)>,
    batch_path: Option<PathBuf>,
    batch_csv: Option<csv::Writer<File>>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_files(dir: &Path, stem: &str) -> Result<Self> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.jsonl"));
        let csv = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
        let json = File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
        Ok(Self {
            csv: Some((csv, csv_path)),
            jsonl: Some((BufWriter::new(json), json_path)),
            batch_path: Some(dir.join(format!("{stem}.batches.csv"))),
            ..Self::default()
        })
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn batch_rows(&self) -> &[BatchRow] {
        &self.batch_rows
    }

    pub fn push_batch(&mut self, row: BatchRow) -> Result<()> {
        if let Some(path) = &self.batch_path {
            if self.batch_csv.is_none() {
                self.batch_csv = Some(csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?);
            }
            let w = self.batch_csv.as_mut().expect("writer just created");
            w.serialize(&row).map_err(|e| csv_error(path, e))?;
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.batch_rows.push(row);
        Ok(())
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some((w, path)) = &mut self.csv {
            w.serialize(&row).map_err(|e| csv_error(path, e))?;
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some((w, path)) = &mut self.jsonl {
            let line = serde_json::to_string(&row).map_err(|e| Error::invalid(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|()| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}
