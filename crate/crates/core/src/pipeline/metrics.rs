use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: Option<f64>,
    pub wall_time_s: f64,
}

/// Append-only log with a non-decreasing step sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

pub const CSV_HEADER: &str = "stage,epoch,step,lr,loss,top1";

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step < last.step {
                return Err(Error::Contract(format!(
                    "metric step {} after step {}",
                    rec.step, last.step
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Appends every record of `other`, whose steps must continue this log.
    pub fn extend(&mut self, other: &MetricLog) -> Result<()> {
        for r in &other.records {
            self.push(r.clone())?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    /// Deterministic CSV: everything but wall time.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.records {
            let top1 = r.top1.map(|v| format!("{v}")).unwrap_or_default();
            writeln!(s, "{},{},{},{},{},{}", r.stage, r.epoch, r.step, r.lr, r.loss, top1).expect("string write");
        }
        s
    }

    /// `stage,epoch,wall_time_s`.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("stage,epoch,wall_time_s\n");
        for r in &self.records {
            writeln!(s, "{},{},{:.3}", r.stage, r.epoch, r.wall_time_s).expect("string write");
        }
        s
    }
}
