use nalgebra::DMatrix;
use ndarray::Array3;
use rand::Rng;

use crate::error::{invalid, structural, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Number of time-of-day slots for a sampling interval (288 at 5 minutes).
pub fn slots_per_day(interval_seconds: u32) -> Result<usize> {
    let interval = interval_seconds as i64;
    if interval == 0 || SECONDS_PER_DAY % interval != 0 {
        return Err(invalid!(
            "sampling interval {interval_seconds}s does not divide a day"
        ));
    }
    Ok((SECONDS_PER_DAY / interval) as usize)
}

/// Maps a timezone-free epoch timestamp to (time-of-day slot, day-of-week),
/// with Monday = 0.
pub fn time_indices(timestamp: i64, interval_seconds: u32) -> Result<(usize, usize)> {
    slots_per_day(interval_seconds)?;
    let interval = interval_seconds as i64;
    if timestamp.rem_euclid(interval) != 0 {
        return Err(invalid!(
            "timestamp {timestamp} is not aligned to the {interval_seconds}s interval"
        ));
    }
    let secs = timestamp.rem_euclid(SECONDS_PER_DAY);
    let days = timestamp.div_euclid(SECONDS_PER_DAY);
    // 1970-01-01 was a Thursday.
    let dow = (days + 3).rem_euclid(7) as usize;
    Ok(((secs / interval) as usize, dow))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbeddingTables {
    /// slots_per_day x d_t
    pub tod_table: DMatrix<f64>,
    /// 7 x d_t
    pub dow_table: DMatrix<f64>,
    pub interval_seconds: u32,
}

impl TimeEmbeddingTables {
    pub fn new(tod_table: DMatrix<f64>, dow_table: DMatrix<f64>, interval_seconds: u32) -> Result<Self> {
        let slots = slots_per_day(interval_seconds)?;
        if tod_table.nrows() != slots || dow_table.nrows() != 7 {
            return Err(structural!(
                "time tables must be {slots}xd and 7xd, got {}x{} and {}x{}",
                tod_table.nrows(),
                tod_table.ncols(),
                dow_table.nrows(),
                dow_table.ncols()
            ));
        }
        if tod_table.ncols() != dow_table.ncols() {
            return Err(structural!("time tables disagree on width"));
        }
        Ok(Self {
            tod_table,
            dow_table,
            interval_seconds,
        })
    }

    /// Uniform(-1/sqrt(d_t), 1/sqrt(d_t)) initialization.
    pub fn random<R: Rng>(interval_seconds: u32, d_t: usize, rng: &mut R) -> Result<Self> {
        let slots = slots_per_day(interval_seconds)?;
        let bound = 1.0 / (d_t as f64).sqrt();
        let tod = DMatrix::from_fn(slots, d_t, |_, _| rng.random_range(-bound..bound));
        let dow = DMatrix::from_fn(7, d_t, |_, _| rng.random_range(-bound..bound));
        Self::new(tod, dow, interval_seconds)
    }

    pub fn d_t(&self) -> usize {
        self.tod_table.ncols()
    }
}

/// `E_T[t, n, :] = tod_table[tod[t]] || dow_table[dow[t]]`, identical for every node.
pub fn lookup_time_embedding(
    tables: &TimeEmbeddingTables,
    tod: &[usize],
    dow: &[usize],
    n_nodes: usize,
) -> Result<Array3<f64>> {
    if tod.len() != dow.len() {
        return Err(structural!(
            "time-of-day and day-of-week sequences differ in length ({} vs {})",
            tod.len(),
            dow.len()
        ));
    }
    let d_t = tables.d_t();
    let slots = tables.tod_table.nrows();
    let mut out = Array3::zeros((tod.len(), n_nodes, 2 * d_t));
    for (t, (&i, &w)) in tod.iter().zip(dow).enumerate() {
        if i >= slots {
            return Err(invalid!("time-of-day index {i} outside 0..{slots}"));
        }
        if w >= 7 {
            return Err(invalid!("day-of-week index {w} outside 0..7"));
        }
        for n in 0..n_nodes {
            for c in 0..d_t {
                out[[t, n, c]] = tables.tod_table[(i, c)];
                out[[t, n, d_t + c]] = tables.dow_table[(w, c)];
            }
        }
    }
    Ok(out)
}
