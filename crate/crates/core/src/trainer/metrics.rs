use std::fmt::Write as _;
use std::path::Path;

use super::{Result, TrainError};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Per-epoch training curve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// CSV with a header row. Floats use Rust's shortest round-trip form,
    /// so parsing the text gives back the same bits.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(TrainError::Config(format!(
                "metrics CSV must start with {METRICS_HEADER:?}"
            )));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || TrainError::Config(format!("metrics line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
            rows.push(MetricsRow {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
                lr: num(5)?,
            });
        }
        Ok(MetricsLog { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Row with the lowest validation loss (earliest on ties).
    pub fn best(&self) -> Option<&MetricsRow> {
        self.rows.iter().fold(None, |best: Option<&MetricsRow>, r| match best {
            Some(b) if b.val_loss <= r.val_loss => Some(b),
            _ => Some(r),
        })
    }
}
