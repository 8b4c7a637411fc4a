//! Drift counteraction optimal control.

pub mod attitude;
pub mod error;
pub mod fd;
pub mod oracle;
pub mod pipeline;
pub mod plot;
pub mod problem;
pub mod scenario;
pub mod solver;
pub mod transcription;

pub use error::{DcocError, Result};
