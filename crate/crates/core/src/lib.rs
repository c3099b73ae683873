//! Numerical toolkit for optimal control of delay equations whose drift
//! depends on the present state, a weighted average of the history and a
//! pointwise delay.

pub mod cli;
pub mod comparison;
pub mod config;
pub mod control;
pub mod dp;
pub mod dynamics;
pub mod error;
pub mod generator;
pub mod segment;

pub use error::{Error, Result};
pub use segment::{Segment, TimedSegment};
