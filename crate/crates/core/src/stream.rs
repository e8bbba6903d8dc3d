//! Line-delimited JSON metrics stream.
//!
//! Every record is written as one complete line and flushed immediately, so
//! the file stays parseable after an aborted run.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Stage1 => "stage1",
            Self::Stage2 => "stage2",
        }
    }
}

/// One optimizer step. Loss components that the stage does not compute are
/// `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub epoch: u64,
    pub loss_total: f64,
    pub loss_embd: Option<f64>,
    pub loss_hidn: Option<f64>,
    pub loss_attn: Option<f64>,
    pub loss_pred: Option<f64>,
    pub alpha: Option<f64>,
    pub map_kind: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: u64,
    pub mean_loss: f64,
    pub metric: String,
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Record {
    /// Split sizes actually used for training and evaluation.
    Data { task: String, train_count: usize, dev_count: usize },
    Step(StepRecord),
    Epoch(EpochRecord),
    Abort { stage: Stage, message: String },
}

pub struct MetricsWriter {
    out: File,
}

impl MetricsWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let out = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &Record) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}
