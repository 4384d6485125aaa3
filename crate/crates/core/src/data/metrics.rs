use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Targets with smaller magnitude are left out of MAPE.
pub const MAPE_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

/// Streaming sums for MAE, RMSE and MAPE over masked entries.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    count: usize,
    abs: f64,
    sq: f64,
    pct_count: usize,
    pct: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, y: f64, target: f64) {
        let err = y - target;
        self.count += 1;
        self.abs += err.abs();
        self.sq += err * err;
        if target.abs() > MAPE_EPSILON {
            self.pct_count += 1;
            self.pct += (err / target).abs();
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// MAPE is 0 when no target clears the epsilon.
    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(invalid!("no entries to score"));
        }
        let n = self.count as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.pct_count == 0 {
                0.0
            } else {
                100.0 * self.pct / self.pct_count as f64
            },
        })
    }
}

pub fn metrics(y: &[f64], target: &[f64], mask: &[bool]) -> Result<Metrics> {
    if y.len() != target.len() || y.len() != mask.len() {
        return Err(invalid!(
            "length mismatch: y {}, target {}, mask {}",
            y.len(),
            target.len(),
            mask.len()
        ));
    }
    let mut acc = MetricAccumulator::default();
    for ((&a, &b), &m) in y.iter().zip(target).zip(mask) {
        if m {
            acc.push(a, b);
        }
    }
    acc.finish()
}
