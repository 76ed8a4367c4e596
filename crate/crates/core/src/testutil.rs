//! Small shared fixtures for unit tests: a 2-station city on a 5x5 grid
//! matching `ModelConfig::micro`.

use crate::data::dataset::CityDataset;
use crate::data::synth::{synth_generate, CitySpec, GridSpec, SynthConfig};
use crate::model::config::ModelConfig;
use crate::model::forecaster::ModelContext;

pub fn micro_synth_config() -> SynthConfig {
    SynthConfig {
        seed: 7,
        days: 12,
        grid: GridSpec { n_lat: 5, n_lon: 5, resolution: 0.1 },
        met_channels: 3,
        ems_channels: 2,
        cities: vec![CitySpec { name: "micro".into(), stations: 2, origin_lat: 30.0, origin_lon: 120.0 }],
        ..SynthConfig::default()
    }
}

pub fn micro_dataset() -> CityDataset {
    synth_generate(&micro_synth_config(), 7).unwrap().remove(0)
}

pub fn micro_context(ds: &CityDataset) -> ModelContext {
    ModelContext::from_dataset(&ModelConfig::micro(), ds).unwrap()
}
