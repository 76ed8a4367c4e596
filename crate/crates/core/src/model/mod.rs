//! The coupled forecasting model: station self-attention over pollutant
//! history, a convolutional encoder over meteorology and emission grids,
//! cross-attention between the two, and a quantile output head rolled out
//! autoregressively.

pub mod config;
pub mod coupling;
pub mod forecaster;
pub mod site;

pub use config::{init_6h_params, init_interp_params, ModelConfig};
pub use coupling::ModalityMask;
pub use forecaster::{ForecastBundle, Forecaster, ModelContext};
