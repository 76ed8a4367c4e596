//! Core library for aircast: a station-level air-quality forecasting system
//! that couples pollutant observations with gridded meteorology and emission
//! fields through attention, rolls forecasts forward in 6-hour steps, and
//! fills in the intermediate hours with a trained interpolator.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod run;
pub mod seed;
pub mod train;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
