use std::ops::Range;

use crate::config::Task;

/// Start offsets of one window pair in dataset time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub input_start: usize,
    pub target_start: usize,
}

/// Windows fully contained in `range`. Forecasting pairs `[t, t+T)` with
/// `[t+T, t+T+H)`; imputation uses the input window as its own target.
pub fn make_windows(range: Range<usize>, task: Task, window: usize, horizon: usize, stride: usize) -> Vec<WindowSpec> {
    let span = match task {
        Task::Forecast => window + horizon,
        Task::Impute => window,
    };
    if range.len() < span || stride == 0 {
        return Vec::new();
    }
    (range.start..=range.end - span)
        .step_by(stride)
        .map(|t| WindowSpec {
            input_start: t,
            target_start: match task {
                Task::Forecast => t + window,
                Task::Impute => t,
            },
        })
        .collect()
}

/// Chronological prefix holding `floor(ratio * len)` windows.
pub fn first_fraction<T: Clone>(windows: &[T], ratio: f64) -> Vec<T> {
    let keep = ((windows.len() as f64) * ratio + 1e-9).floor() as usize;
    windows[..keep.min(windows.len())].to_vec()
}
