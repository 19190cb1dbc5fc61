//! Per-epoch search records, persisted as JSON lines.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::SimplexVector;
use crate::supernet::{NUM_EDGES, NUM_OPS};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    EpochLimit,
}

/// State of the search at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub temperature: f64,
    /// One simplex vector per edge, in edge order.
    pub probabilities: Vec<SimplexVector>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Seconds since the search loop started.
    pub elapsed_s: f64,
    pub lr_w: f64,
    /// Weight steps taken during this epoch.
    pub inner_steps: usize,
    /// Architecture updates applied during this epoch.
    pub alpha_updates: usize,
    pub alpha: Vec<[f64; NUM_OPS]>,
    /// Present on the final record only.
    pub stop_reason: Option<StopReason>,
}

impl EpochRecord {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != TRACE_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "trace schema version {} (expected {TRACE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.probabilities.len() != NUM_EDGES || self.alpha.len() != NUM_EDGES {
            return Err(Error::Validation(format!("epoch {}: expected {NUM_EDGES} edges", self.epoch)));
        }
        for p in &self.probabilities {
            SimplexVector::new(p.to_vec())?;
            if p.len() != NUM_OPS {
                return Err(Error::Validation(format!("epoch {}: expected {NUM_OPS} operations", self.epoch)));
            }
        }
        Ok(())
    }

    /// Per-edge argmax of the recorded probabilities.
    pub fn argmax(&self) -> Vec<usize> {
        self.probabilities.iter().map(SimplexVector::argmax).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchTrace {
    records: Vec<EpochRecord>,
}

impl SearchTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn last_mut(&mut self) -> Option<&mut EpochRecord> {
        self.records.last_mut()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.records.last().and_then(|r| r.stop_reason)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parses and validates a JSON-lines trace; blank lines are skipped.
    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: EpochRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("trace line {}: {e}", i + 1)))?;
            r.validate()?;
            records.push(r);
        }
        let trace = Self { records };
        trace.check_order()?;
        Ok(trace)
    }

    fn check_order(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].epoch != w[0].epoch + 1 {
                return Err(Error::Validation(format!("epoch {} follows {}", w[1].epoch, w[0].epoch)));
            }
            if !(w[1].elapsed_s > w[0].elapsed_s) {
                return Err(Error::Validation(format!("timestamps not increasing at epoch {}", w[1].epoch)));
            }
        }
        Ok(())
    }
}

/// True when each of the last `patience` records is one-hot on every edge
/// (max ≥ 1 − `onehot_eps`) and the per-edge argmax is the same in all of them.
pub fn early_stop_check(records: &[EpochRecord], patience: usize, onehot_eps: f64) -> bool {
    if patience == 0 || records.len() < patience {
        return false;
    }
    let window = &records[records.len() - patience..];
    let first = window[0].argmax();
    window.iter().all(|r| {
        r.probabilities.iter().all(|p| p.max() >= 1.0 - onehot_eps) && r.argmax() == first
    })
}
