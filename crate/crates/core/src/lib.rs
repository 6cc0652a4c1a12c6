//! Predict-then-classify sepsis early warning on hourly vital-sign windows.
//!
//! Stage 1 forecasts every indicator at the evaluation hour through a
//! reprogrammed, prompt-prefixed transformer and constrains the forecast to a
//! physiological envelope. Stage 2 appends that forecast to the history and
//! classifies onset.

pub mod backbone;
pub mod clinscore;
pub mod cohort;
pub mod error;
pub mod evalx;
pub mod numcore;
pub mod pipeline;
pub mod postproc;
pub mod prompt;
pub mod reprogram;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
