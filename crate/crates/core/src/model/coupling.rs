//! Meteorology and emission grids encoded by residual convolutions, then
//! queried by station latents through cross-attention.

use crate::data::types::{ChannelStats, GriddedField};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::nn;
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};

/// Which grid modalities reach the encoder. Disabled channels are zeroed
/// after normalization, so shapes and parameter counts never change between
/// ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityMask {
    pub met: bool,
    pub ems: bool,
}

impl ModalityMask {
    pub const ALL: Self = Self { met: true, ems: true };
    pub const NO_MET: Self = Self { met: false, ems: true };
    pub const NO_EMS: Self = Self { met: true, ems: false };
    pub const NONE: Self = Self { met: false, ems: false };
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Encoded grid: one latent column per cell, in row-major cell order, so
/// column `c` of the latent corresponds to cell `(c / n_lon, c % n_lon)`.
pub struct GridLatent {
    /// `[d_model x N_grids]`
    pub latent: NodeId,
    pub n_lat: usize,
    pub n_lon: usize,
}

impl GridLatent {
    pub fn cell_of(&self, column: usize) -> (usize, usize) {
        (column / self.n_lon, column % self.n_lon)
    }
}

/// Cross-attention output plus its inspection handles.
pub struct CrossAttention {
    /// `[d_model x N_s]` coupled station latents.
    pub latent: NodeId,
    /// `[N_s x N_grids]` row-stochastic attention; row `i` holds the weight
    /// station `i` places on every grid cell.
    pub attention: NodeId,
    /// `[d_model x N_s]` attended grid features before the residual.
    pub context: NodeId,
}

fn geometry_matches(a: &GriddedField, b: &GriddedField) -> bool {
    a.n_lat == b.n_lat
        && a.n_lon == b.n_lon
        && (a.origin_lat - b.origin_lat).abs() <= 1e-9
        && (a.origin_lon - b.origin_lon).abs() <= 1e-9
        && (a.resolution - b.resolution).abs() <= 1e-9
}

/// Stack the standardized meteorology channels, standardized emission
/// channels, and the two positional channels into the `[C_in x H x W]`
/// encoder input. Channels of a masked modality are written as zeros.
pub fn grid_input_tensor(
    cfg: &ModelConfig,
    mask: ModalityMask,
    met: &GriddedField,
    ems: &GriddedField,
    pe_grid: &Tensor,
    met_stats: &ChannelStats,
    ems_stats: &ChannelStats,
) -> Result<Tensor> {
    if met.n_lat != cfg.grid_n_lat || met.n_lon != cfg.grid_n_lon {
        return Err(Error::ShapeMismatch {
            op: "grid_input_tensor",
            detail: format!(
                "met grid is {}x{}, config expects {}x{}",
                met.n_lat, met.n_lon, cfg.grid_n_lat, cfg.grid_n_lon
            ),
        });
    }
    if !geometry_matches(met, ems) {
        return Err(Error::ShapeMismatch {
            op: "grid_input_tensor",
            detail: "met and ems grids disagree on origin, resolution, or size".into(),
        });
    }
    if met.n_channels() != cfg.met_channels || ems.n_channels() != cfg.ems_channels {
        return Err(Error::ShapeMismatch {
            op: "grid_input_tensor",
            detail: format!(
                "channel counts (met {}, ems {}) do not match config ({}, {})",
                met.n_channels(),
                ems.n_channels(),
                cfg.met_channels,
                cfg.ems_channels
            ),
        });
    }
    if met_stats.mean.len() != cfg.met_channels || ems_stats.mean.len() != cfg.ems_channels {
        return Err(Error::ShapeMismatch {
            op: "grid_input_tensor",
            detail: "channel statistics length does not match channel counts".into(),
        });
    }
    let (h, w) = (met.n_lat, met.n_lon);
    if pe_grid.shape() != [2, h, w] {
        return Err(Error::ShapeMismatch {
            op: "grid_input_tensor",
            detail: format!("pe_grid has shape {:?}, expected [2, {h}, {w}]", pe_grid.shape()),
        });
    }
    let mut out = Tensor::zeros(&[cfg.grid_in_channels(), h, w]);
    for c in 0..cfg.met_channels {
        if !mask.met {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let v = (met.at(c, y, x) - met_stats.mean[c]) / met_stats.std[c];
                out.set3(c, y, x, v);
            }
        }
    }
    for c in 0..cfg.ems_channels {
        if !mask.ems {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let v = (ems.at(c, y, x) - ems_stats.mean[c]) / ems_stats.std[c];
                out.set3(cfg.met_channels + c, y, x, v);
            }
        }
    }
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                out.set3(cfg.met_channels + cfg.ems_channels + c, y, x, pe_grid.at3(c, y, x));
            }
        }
    }
    out.check_finite("grid_input_tensor")?;
    Ok(out)
}

/// Run the residual convolution stack over an assembled grid input and
/// flatten the spatial axes into latent columns.
pub fn grid_encode(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, input: &Tensor) -> Result<GridLatent> {
    let expect = [cfg.grid_in_channels(), cfg.grid_n_lat, cfg.grid_n_lon];
    if input.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "grid_encode",
            detail: format!("input has shape {:?}, expected {:?}", input.shape(), expect),
        });
    }
    let n_grids = cfg.n_grids();
    if n_grids == 0 {
        return Err(Error::InvalidInput("grid_encode requires at least one grid cell".into()));
    }
    let mut x = g.input(input.clone())?;
    for b in 0..cfg.resnet_depth {
        x = nn::apply_res_block(g, store, &format!("grid.block{b}"), x)?;
    }
    let latent = g.reshape(x, vec![cfg.d_model, n_grids])?;
    Ok(GridLatent { latent, n_lat: cfg.grid_n_lat, n_lon: cfg.grid_n_lon })
}

/// Query the grid latent with station latents: `Q` from stations, `K`/`V`
/// from grid columns, output `MLP(LN(Q + V.A^T))` with the residual on the
/// query side.
pub fn cross_attention_coupling(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    site_latent: NodeId,
    grid_latent: NodeId,
) -> Result<CrossAttention> {
    let d = cfg.d_model;
    let site_shape = g.value(site_latent).shape().to_vec();
    let grid_shape = g.value(grid_latent).shape().to_vec();
    if site_shape.len() != 2 || site_shape[0] != d || grid_shape.len() != 2 || grid_shape[0] != d {
        return Err(Error::ShapeMismatch {
            op: "cross_attention_coupling",
            detail: format!("site latent {site_shape:?} and grid latent {grid_shape:?} must both have {d} rows"),
        });
    }
    if grid_shape[1] == 0 {
        return Err(Error::InvalidInput("cross_attention_coupling requires at least one grid column".into()));
    }
    let wq = nn::param_node(g, store, "cross.wq")?;
    let wk = nn::param_node(g, store, "cross.wk")?;
    let wv = nn::param_node(g, store, "cross.wv")?;
    let q = g.matmul(wq, site_latent)?;
    let k = g.matmul(wk, grid_latent)?;
    let v = g.matmul(wv, grid_latent)?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(qt, k)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attention = g.softmax(scaled, 1)?;
    let at = g.transpose(attention)?;
    let context = g.matmul(v, at)?;
    let residual = g.add(q, context)?;
    let normed = nn::apply_layer_norm(g, store, "cross.ln", residual)?;
    let latent = nn::apply_mlp(g, store, "cross.mlp", normed)?;
    Ok(CrossAttention { latent, attention, context })
}
