use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One row of the loss-curve CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when training ran without a validation set.
    pub val_loss: Option<f64>,
    pub wall_seconds: f64,
}

pub const HEADER: &str = "epoch,train_loss,val_loss,wall_seconds";

pub fn format_epoch_log(logs: &[EpochLog]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for l in logs {
        let val = l.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{:.3}", l.epoch, l.train_loss, val, l.wall_seconds);
    }
    out
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    fs::write(path, format_epoch_log(logs)).map_err(|e| Error::io(path, e))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format(format!("{}: missing header {HEADER:?}", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Format(format!("{}: malformed row {line:?}", path.display()));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                val_loss: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad())?)
                },
                wall_seconds: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
