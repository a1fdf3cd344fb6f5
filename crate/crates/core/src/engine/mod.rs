//! Timing models of the two processing engines.

pub mod agg;
pub mod comb;
