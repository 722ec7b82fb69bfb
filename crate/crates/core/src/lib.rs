//! Fairness-aware training objectives for sequential recommenders.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod groups;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
