//! Missing-location recovery for sparse mobility trajectories with
//! attention over the current day and the user's history.

pub mod attn;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod embed;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
