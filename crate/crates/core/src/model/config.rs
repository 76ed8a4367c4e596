//! Model hyperparameters and parameter registration for the 6-hour
//! forecaster and the hourly interpolator.

use serde::{Deserialize, Serialize};

use crate::data::types::N_POLLUTANTS;
use crate::error::{Error, Result};
use crate::numerics::nn;
use crate::numerics::params::ParamStore;

pub const DOY_TABLE_ROWS: usize = 366;
pub const HOD_TABLE_ROWS: usize = 24;

/// Hours spanned by one autoregressive step.
pub const STEP_HOURS: usize = 6;
/// Hourly frames interpolated between consecutive steps.
pub const INTERP_FRAMES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub temb_dim: usize,
    pub mlp_hidden: usize,
    pub resnet_depth: usize,
    pub resnet_width: usize,
    pub quantiles: Vec<f64>,
    pub horizon_steps: usize,
    pub met_channels: usize,
    pub ems_channels: usize,
    pub n_stations: usize,
    pub grid_n_lat: usize,
    pub grid_n_lon: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            temb_dim: 8,
            mlp_hidden: 64,
            resnet_depth: 2,
            resnet_width: 16,
            quantiles: vec![0.1, 0.5, 0.9],
            horizon_steps: 12,
            met_channels: 19,
            ems_channels: 7,
            n_stations: 19,
            grid_n_lat: 20,
            grid_n_lon: 20,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by gradient verification and micro tests.
    pub fn micro() -> Self {
        Self {
            d_model: 8,
            temb_dim: 4,
            mlp_hidden: 16,
            resnet_depth: 1,
            resnet_width: 4,
            quantiles: vec![0.1, 0.5, 0.9],
            horizon_steps: 12,
            met_channels: 3,
            ems_channels: 2,
            n_stations: 2,
            grid_n_lat: 5,
            grid_n_lon: 5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model < 2 {
            problems.push(format!("d_model: {} must be at least 2", self.d_model));
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            problems.push(format!("temb_dim: {} must be even and at least 2", self.temb_dim));
        }
        if self.mlp_hidden == 0 {
            problems.push("mlp_hidden: must be at least 1".into());
        }
        if self.resnet_depth == 0 {
            problems.push("resnet_depth: must be at least 1".into());
        }
        if self.resnet_width < 2 {
            problems.push(format!("resnet_width: {} must be at least 2", self.resnet_width));
        }
        if self.horizon_steps == 0 {
            problems.push("horizon_steps: must be at least 1".into());
        }
        if self.quantiles.is_empty()
            || !self.quantiles.iter().all(|q| q.is_finite() && *q > 0.0 && *q < 1.0)
            || !self.quantiles.windows(2).all(|w| w[0] < w[1])
        {
            problems.push(format!(
                "quantiles: {:?} must be strictly increasing within (0, 1)",
                self.quantiles
            ));
        } else if !self.quantiles.iter().any(|q| *q == 0.5) {
            problems.push("quantiles: must contain 0.5 (the autoregressed slice)".into());
        }
        if self.met_channels == 0 {
            problems.push("met_channels: must be at least 1".into());
        }
        if self.ems_channels == 0 {
            problems.push("ems_channels: must be at least 1".into());
        }
        if self.n_stations == 0 {
            problems.push("n_stations: must be at least 1".into());
        }
        if self.grid_n_lat < 3 || self.grid_n_lon < 3 {
            problems.push(format!(
                "grid: {}x{} must be at least 3x3 for the 3x3 convolutions",
                self.grid_n_lat, self.grid_n_lon
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// Rows of the assembled site input: two pollutant frames, four
    /// positional components, and the temporal embedding.
    pub fn feature_width(&self) -> usize {
        2 * N_POLLUTANTS + 4 + self.temb_dim
    }

    pub fn n_quantiles(&self) -> usize {
        self.quantiles.len()
    }

    pub fn median_index(&self) -> usize {
        self.quantiles
            .iter()
            .position(|q| *q == 0.5)
            .expect("validated configs contain the median")
    }

    /// Channels entering the grid encoder: meteorology, emissions, and the
    /// two positional channels.
    pub fn grid_in_channels(&self) -> usize {
        self.met_channels + self.ems_channels + 2
    }

    /// Grid cells per frame, equal to the latent column count because the
    /// encoder never downsamples.
    pub fn n_grids(&self) -> usize {
        self.grid_n_lat * self.grid_n_lon
    }

    /// Channel count of block `b` of the grid encoder. Intermediate blocks
    /// run at `resnet_width`; the final block widens to `d_model` so grid
    /// latent columns match the cross-attention key/value input width.
    pub fn grid_block_out(&self, b: usize) -> usize {
        if b + 1 == self.resnet_depth {
            self.d_model
        } else {
            self.resnet_width
        }
    }

    /// Output rows of the 6-hour head: one value per (pollutant, quantile).
    pub fn head_rows_6h(&self) -> usize {
        N_POLLUTANTS * self.n_quantiles()
    }

    /// Output rows of the interpolation head: one value per (intermediate
    /// hour, pollutant, quantile).
    pub fn head_rows_interp(&self) -> usize {
        INTERP_FRAMES * N_POLLUTANTS * self.n_quantiles()
    }
}

/// Register every tensor of one model family into `store`.
fn init_params(store: &mut ParamStore, cfg: &ModelConfig, head_rows: usize, seed: u64) -> Result<()> {
    let f = cfg.feature_width();
    let d = cfg.d_model;
    let proj_std = 1.0 / (f as f64).sqrt();
    store.insert_gaussian("site.wq", &[d, f], proj_std, seed)?;
    store.insert_gaussian("site.wk", &[d, f], proj_std, seed)?;
    store.insert_gaussian("site.wv", &[d, f], proj_std, seed)?;
    nn::init_layer_norm(store, "site.ln", d)?;
    nn::init_mlp(store, "site.mlp", d, cfg.mlp_hidden, d, seed)?;

    store.insert_gaussian("temb.doy", &[DOY_TABLE_ROWS, cfg.temb_dim / 2], 0.1, seed)?;
    store.insert_gaussian("temb.hod", &[HOD_TABLE_ROWS, cfg.temb_dim / 2], 0.1, seed)?;

    let mut c_in = cfg.grid_in_channels();
    for b in 0..cfg.resnet_depth {
        let c_out = cfg.grid_block_out(b);
        nn::init_res_block(store, &format!("grid.block{b}"), c_in, c_out, seed)?;
        c_in = c_out;
    }

    let attn_std = 1.0 / (d as f64).sqrt();
    store.insert_gaussian("cross.wq", &[d, d], attn_std, seed)?;
    store.insert_gaussian("cross.wk", &[d, d], attn_std, seed)?;
    store.insert_gaussian("cross.wv", &[d, d], attn_std, seed)?;
    nn::init_layer_norm(store, "cross.ln", d)?;
    nn::init_mlp(store, "cross.mlp", d, cfg.mlp_hidden, d, seed)?;

    nn::init_linear(store, "head", d, head_rows, seed)?;
    Ok(())
}

/// Fresh parameters for the 6-hour forecaster.
pub fn init_6h_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    init_params(&mut store, cfg, cfg.head_rows_6h(), seed)?;
    Ok(store)
}

/// Fresh parameters for the hourly interpolator; same structure, its own
/// store, and a wider head.
pub fn init_interp_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    init_params(&mut store, cfg, cfg.head_rows_interp(), seed)?;
    Ok(store)
}
