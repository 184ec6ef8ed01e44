//! Line-delimited JSON metric log.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::dataset::Split;
use super::eval::EvalReport;
use crate::error::{Error, Result};
use crate::losses::LossBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    Batch {
        epoch: usize,
        step: usize,
        lr: f64,
        losses: LossBundle,
        reward: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_ms: Option<f64>,
    },
    Eval {
        epoch: usize,
        step: usize,
        split: Split,
        report: EvalReport,
        best: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wall_ms: Option<f64>,
    },
}

/// Append-only sequence of records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<LogRecord>,
}

impl MetricLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn batches(&self) -> impl Iterator<Item = (usize, &LossBundle, f64)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Batch {
                epoch,
                losses,
                reward,
                ..
            } => Some((*epoch, losses, *reward)),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, &EvalReport, bool)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval {
                epoch,
                report,
                best,
                ..
            } => Some((*epoch, report, *best)),
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            write_record(&mut w, r)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut log = Self::new();
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("log line {}: {e}", no + 1)))?;
            log.push(rec);
        }
        Ok(log)
    }
}

pub fn write_record<W: Write + ?Sized>(w: &mut W, r: &LogRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, r)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Per-epoch means of a batch-level quantity.
pub fn epoch_means(log: &MetricLog, f: impl Fn(&LossBundle, f64) -> f64) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (epoch, losses, reward) in log.batches() {
        if sums.len() <= epoch {
            sums.resize(epoch + 1, (0.0, 0));
        }
        sums[epoch].0 += f(losses, reward);
        sums[epoch].1 += 1;
    }
    sums.into_iter()
        .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect()
}

/// Trailing moving average with window `w`.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
