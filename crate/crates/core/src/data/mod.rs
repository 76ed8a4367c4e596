//! Domain types, ingestion, preprocessing, window extraction, and the
//! synthetic data generator.

pub mod dataset;
pub mod gaps;
pub mod grid;
pub mod pe;
pub mod station_csv;
pub mod stats;
pub mod synth;
pub mod types;
pub mod windows;

pub use dataset::CityDataset;
pub use types::{
    encode_time, ChannelStats, GriddedField, NormStats, Pollutant, Station, StationSeries, TimeCode,
    N_POLLUTANTS, POLLUTANTS,
};
pub use windows::{build_windows, SampleWindow, WindowKind};
