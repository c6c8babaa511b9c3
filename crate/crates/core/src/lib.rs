//! Forecast-driven reinforcement-learning control of a calendering line.

pub mod checkpoint;
pub mod envloop;
pub mod forecast;
pub mod mpdppo;
mod error;
pub mod neuro;
pub mod plantgen;
pub mod series;

pub use error::{Error, Result};
