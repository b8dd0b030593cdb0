//! Desk-scale laboratory for memory-space visual prompting: a toy
//! transformer whose FFN blocks accept visual features as extra key-value
//! memory entries, plus the baselines, cost model, trainer, and probes
//! needed to exercise the mechanism end to end.

pub mod count;
pub mod error;
pub mod numkit;

pub mod baselines;
pub mod costmodel;
pub mod memvp;
pub mod probe;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use numkit::Matrix;
