//! Experiment runner for the offline meta-RL stack: dataset generation,
//! training, evaluation, ablation grids, and numerical verification — all
//! deterministic given (config, seed), with diffable CSV/JSON artifacts.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod metrics;

/// An input or configuration problem the user can fix; mapped to exit
/// code 1 (runtime failures map to 2).
#[derive(Debug)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ValidationError {}

/// Shortcut for validation failures inside `anyhow` pipelines.
#[macro_export]
macro_rules! invalid {
    ($($arg:tt)*) => {
        return Err($crate::ValidationError(format!($($arg)*)).into())
    };
}

/// Format a float with 17 significant digits, enough to round-trip f64
/// exactly through text.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
