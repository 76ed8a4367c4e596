//! End-to-end forecasting: a single 6-hour step, the autoregressive rollout,
//! hourly interpolation between steps, and the emitted bundle with CSV IO.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::data::dataset::CityDataset;
use crate::data::pe::{grid_pe, station_pe};
use crate::data::stats::denormalize;
use crate::data::types::{
    encode_time, ChannelStats, GriddedField, NormStats, Pollutant, Station, TimeCode, N_POLLUTANTS,
    POLLUTANTS,
};
use crate::data::windows::frame_at;
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, INTERP_FRAMES, STEP_HOURS};
use crate::model::coupling::{cross_attention_coupling, grid_encode, grid_input_tensor, ModalityMask};
use crate::model::site::{assemble_site_input, site_self_attention, temporal_embed};
use crate::numerics::checkpoint;
use crate::numerics::nn;
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};

const SIX_HOUR_DIR: &str = "model6h";
const INTERP_DIR: &str = "interp";

/// Grid placement and size without any data, enough to rebuild positional
/// encodings from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub resolution: f64,
    pub n_lat: usize,
    pub n_lon: usize,
}

impl GridGeometry {
    pub fn of(field: &GriddedField) -> Self {
        Self {
            origin_lat: field.origin_lat,
            origin_lon: field.origin_lon,
            resolution: field.resolution,
            n_lat: field.n_lat,
            n_lon: field.n_lon,
        }
    }

    fn empty_field(&self) -> GriddedField {
        GriddedField::zeros(
            self.origin_lat,
            self.origin_lon,
            self.resolution,
            self.n_lat,
            self.n_lon,
            Vec::new(),
            DateTime::<Utc>::UNIX_EPOCH,
        )
    }
}

/// Everything a checkpoint must remember besides the weights: the city, its
/// stations, the grid placement, and the standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub city: String,
    pub model: ModelConfig,
    pub stations: Vec<Station>,
    pub grid: GridGeometry,
    pub norm: NormStats,
    pub met_stats: ChannelStats,
    pub ems_stats: ChannelStats,
}

/// Static forward-pass context: configuration, statistics, and the
/// precomputed positional encodings.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub meta: ModelMeta,
    pub mask: ModalityMask,
    /// `[4 x N_s]`
    pub station_pe: Tensor,
    /// `[2 x H x W]`
    pub grid_pe: Tensor,
}

impl ModelContext {
    pub fn from_meta(meta: ModelMeta) -> Result<Self> {
        meta.model.validate()?;
        if meta.stations.len() != meta.model.n_stations {
            return Err(Error::InvalidConfig(format!(
                "context lists {} stations but the model expects {}",
                meta.stations.len(),
                meta.model.n_stations
            )));
        }
        if meta.grid.n_lat != meta.model.grid_n_lat || meta.grid.n_lon != meta.model.grid_n_lon {
            return Err(Error::InvalidConfig(format!(
                "grid geometry {}x{} does not match the model's {}x{}",
                meta.grid.n_lat, meta.grid.n_lon, meta.model.grid_n_lat, meta.model.grid_n_lon
            )));
        }
        if meta.met_stats.mean.len() != meta.model.met_channels
            || meta.ems_stats.mean.len() != meta.model.ems_channels
        {
            return Err(Error::InvalidConfig(
                "channel statistics do not match the configured channel counts".into(),
            ));
        }
        let probe = meta.grid.empty_field();
        let station_pe = station_pe(&meta.stations, &probe)?;
        let grid_pe = grid_pe(&meta.stations, &probe)?;
        Ok(Self { meta, mask: ModalityMask::ALL, station_pe, grid_pe })
    }

    /// Derive the context from a dataset: statistics from its history, grid
    /// geometry from its first meteorology frame.
    pub fn from_dataset(cfg: &ModelConfig, ds: &CityDataset) -> Result<Self> {
        cfg.validate()?;
        if ds.n_stations() != cfg.n_stations {
            return Err(Error::InvalidConfig(format!(
                "dataset has {} stations but the model expects {}",
                ds.n_stations(),
                cfg.n_stations
            )));
        }
        let met0 = ds
            .met
            .first()
            .ok_or_else(|| Error::MissingArtifact("dataset has no meteorology frames".into()))?;
        let ems0 = ds
            .ems
            .first()
            .ok_or_else(|| Error::MissingArtifact("dataset has no emission frames".into()))?;
        if met0.n_channels() != cfg.met_channels || ems0.n_channels() != cfg.ems_channels {
            return Err(Error::InvalidConfig(format!(
                "dataset channels (met {}, ems {}) do not match the model ({}, {})",
                met0.n_channels(),
                ems0.n_channels(),
                cfg.met_channels,
                cfg.ems_channels
            )));
        }
        let meta = ModelMeta {
            city: ds.city.clone(),
            model: cfg.clone(),
            stations: ds.stations(),
            grid: GridGeometry::of(met0),
            norm: ds.norm_stats()?,
            met_stats: ds.met_channel_stats()?,
            ems_stats: ds.ems_channel_stats()?,
        };
        Self::from_meta(meta)
    }

    pub fn with_mask(mut self, mask: ModalityMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.meta.model
    }

    pub fn station_ids(&self) -> Vec<String> {
        self.meta.stations.iter().map(|s| s.id.clone()).collect()
    }
}

/// One assembled forward graph plus its inspection handles.
pub struct StepGraph {
    pub graph: Graph,
    /// `[head_rows x N_s]`
    pub output: NodeId,
    /// `[N_s x N_s]`
    pub site_attention: NodeId,
    /// `[N_s x N_grids]`
    pub cross_attention: NodeId,
}

/// Wire the full pipeline for one step into a fresh graph. `head_rows`
/// guards against mixing up the 6-hour and interpolation weight stores.
pub fn build_step_graph(
    ctx: &ModelContext,
    store: &ParamStore,
    head_rows: usize,
    x_prev: &Tensor,
    x_curr: &Tensor,
    met: &GriddedField,
    ems: &GriddedField,
    tc: &TimeCode,
) -> Result<StepGraph> {
    let cfg = ctx.cfg();
    let head_shape = store.get("head.w")?.shape().to_vec();
    if head_shape != [head_rows, cfg.d_model] {
        return Err(Error::ShapeMismatch {
            op: "build_step_graph",
            detail: format!(
                "head is {head_shape:?} but this pass needs [{head_rows}, {}]; wrong weight store?",
                cfg.d_model
            ),
        });
    }
    let grid_input =
        grid_input_tensor(cfg, ctx.mask, met, ems, &ctx.grid_pe, &ctx.meta.met_stats, &ctx.meta.ems_stats)?;
    let mut g = Graph::new();
    let temb = temporal_embed(&mut g, store, tc)?;
    let x = assemble_site_input(&mut g, cfg, x_prev, x_curr, &ctx.station_pe, temb)?;
    let site = site_self_attention(&mut g, store, cfg, x)?;
    let grid = grid_encode(&mut g, store, cfg, &grid_input)?;
    let cross = cross_attention_coupling(&mut g, store, cfg, site.latent, grid.latent)?;
    let output = nn::apply_linear(&mut g, store, "head", cross.latent)?;
    Ok(StepGraph {
        graph: g,
        output,
        site_attention: site.attention,
        cross_attention: cross.attention,
    })
}

fn to_prediction_6h(out: &Tensor, n_s: usize, nq: usize) -> Tensor {
    let mut data = vec![0.0; n_s * N_POLLUTANTS * nq];
    for s in 0..n_s {
        for p in 0..N_POLLUTANTS {
            for q in 0..nq {
                data[(s * N_POLLUTANTS + p) * nq + q] = out.at2(p * nq + q, s);
            }
        }
    }
    Tensor::new(vec![n_s, N_POLLUTANTS, nq], data).expect("sized above")
}

fn to_prediction_interp(out: &Tensor, n_s: usize, nq: usize) -> Tensor {
    let mut data = vec![0.0; INTERP_FRAMES * n_s * N_POLLUTANTS * nq];
    for k in 0..INTERP_FRAMES {
        for s in 0..n_s {
            for p in 0..N_POLLUTANTS {
                for q in 0..nq {
                    data[((k * n_s + s) * N_POLLUTANTS + p) * nq + q] =
                        out.at2((k * N_POLLUTANTS + p) * nq + q, s);
                }
            }
        }
    }
    Tensor::new(vec![INTERP_FRAMES, n_s, N_POLLUTANTS, nq], data).expect("sized above")
}

/// One 6-hour prediction step in normalized space.
///
/// Returns `[N_s x N_POLLUTANTS x Q]`, quantiles in configuration order and
/// not yet sorted.
pub fn step_forecast(
    ctx: &ModelContext,
    store: &ParamStore,
    x_prev: &Tensor,
    x_curr: &Tensor,
    met: &GriddedField,
    ems: &GriddedField,
    tc: &TimeCode,
) -> Result<Tensor> {
    let cfg = ctx.cfg();
    let parts = build_step_graph(ctx, store, cfg.head_rows_6h(), x_prev, x_curr, met, ems, tc)?;
    Ok(to_prediction_6h(parts.graph.value(parts.output), cfg.n_stations, cfg.n_quantiles()))
}

/// Infill the five hours between two bracketing frames, in normalized space.
///
/// `left` and `right` are the median frames at the bracket endpoints; `met`
/// is the frame at the central hour; `tc` encodes the left endpoint.
/// Returns `[5 x N_s x N_POLLUTANTS x Q]`, unsorted.
pub fn interpolate_frames(
    ctx: &ModelContext,
    istore: &ParamStore,
    left: &Tensor,
    right: &Tensor,
    met: &GriddedField,
    ems: &GriddedField,
    tc: &TimeCode,
) -> Result<Tensor> {
    let cfg = ctx.cfg();
    let parts = build_step_graph(ctx, istore, cfg.head_rows_interp(), left, right, met, ems, tc)?;
    Ok(to_prediction_interp(parts.graph.value(parts.output), cfg.n_stations, cfg.n_quantiles()))
}

/// Extract the median (0.5-quantile) slice of a `[N_s x 6 x Q]` prediction.
fn median_slice(pred: &Tensor, cfg: &ModelConfig) -> Tensor {
    let nq = cfg.n_quantiles();
    let mi = cfg.median_index();
    Tensor::from_fn2(cfg.n_stations, N_POLLUTANTS, |s, p| pred.data()[(s * N_POLLUTANTS + p) * nq + mi])
}

/// Sort the quantile axis and map back to physical units.
fn emit_frame(raw: &Tensor, norm: &NormStats, n_s: usize, nq: usize) -> Tensor {
    let mut out = vec![0.0; n_s * N_POLLUTANTS * nq];
    let mut slice = vec![0.0; nq];
    for s in 0..n_s {
        for p in 0..N_POLLUTANTS {
            for q in 0..nq {
                slice[q] = raw.data()[(s * N_POLLUTANTS + p) * nq + q];
            }
            slice.sort_by(|a, b| a.partial_cmp(b).expect("finite by construction"));
            for q in 0..nq {
                out[(s * N_POLLUTANTS + p) * nq + q] = denormalize(slice[q], norm, p);
            }
        }
    }
    Tensor::new(vec![n_s, N_POLLUTANTS, nq], out).expect("sized above")
}

fn check_met_frame(met_seq: &[GriddedField], idx: usize, expected: DateTime<Utc>, label: &str) -> Result<()> {
    match met_seq.get(idx) {
        None => Err(Error::MissingArtifact(format!(
            "{label} needs a meteorology frame at {} but only {} frames were provided",
            expected.to_rfc3339_opts(SecondsFormat::Secs, true),
            met_seq.len()
        ))),
        Some(f) if f.time != expected => Err(Error::InvalidInput(format!(
            "{label} needs the meteorology frame at {} but frame {idx} is timestamped {}",
            expected.to_rfc3339_opts(SecondsFormat::Secs, true),
            f.time.to_rfc3339_opts(SecondsFormat::Secs, true)
        ))),
        Some(_) => Ok(()),
    }
}

/// Run `steps` autoregressive steps, feeding each median back as the next
/// current frame. Returns the raw normalized `[N_s x 6 x Q]` predictions in
/// step order.
fn rollout_raw(
    ctx: &ModelContext,
    store: &ParamStore,
    x_prev: &Tensor,
    x_curr: &Tensor,
    met_seq: &[GriddedField],
    ems: &GriddedField,
    t0: DateTime<Utc>,
    steps: usize,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::InvalidInput("rollout needs at least one step".into()));
    }
    let cfg = ctx.cfg();
    let mut prev = x_prev.clone();
    let mut curr = x_curr.clone();
    let mut frames = Vec::with_capacity(steps);
    for k in 1..=steps {
        let target_time = t0 + Duration::hours((STEP_HOURS * k) as i64);
        check_met_frame(met_seq, k - 1, target_time, &format!("rollout step {k}"))?;
        let tc = encode_time(t0 + Duration::hours((STEP_HOURS * (k - 1)) as i64));
        let pred = step_forecast(ctx, store, &prev, &curr, &met_seq[k - 1], ems, &tc)?;
        let median = median_slice(&pred, cfg);
        frames.push(pred);
        prev = curr;
        curr = median;
    }
    Ok(frames)
}

/// Autoregressive 6-hour forecast: `steps` frames at lead hours 6, 12, ...,
/// denormalized and quantile-sorted.
pub fn rollout(
    ctx: &ModelContext,
    store: &ParamStore,
    x_prev: &Tensor,
    x_curr: &Tensor,
    met_seq: &[GriddedField],
    ems: &GriddedField,
    t0: DateTime<Utc>,
    steps: usize,
) -> Result<ForecastBundle> {
    let raw = rollout_raw(ctx, store, x_prev, x_curr, met_seq, ems, t0, steps)?;
    let cfg = ctx.cfg();
    let bundle = ForecastBundle {
        init_time: t0,
        quantiles: cfg.quantiles.clone(),
        station_ids: ctx.station_ids(),
        lead_hours: (1..=steps as u32).map(|k| k * STEP_HOURS as u32).collect(),
        frames: raw
            .iter()
            .map(|r| emit_frame(r, &ctx.meta.norm, cfg.n_stations, cfg.n_quantiles()))
            .collect(),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Everything a forecast run needs besides weights: the two initialization
/// frames and the meteorology/emission context over the horizon.
#[derive(Debug, Clone)]
pub struct ForecastInputs {
    /// `[N_s x 6]` normalized observations at `t0 - 6h`.
    pub x_prev: Tensor,
    /// `[N_s x 6]` normalized observations at `t0`.
    pub x_curr: Tensor,
    /// Frame `k` holds the meteorology at `t0 + 6(k+1) h` (step targets).
    pub met_step: Vec<GriddedField>,
    /// Frame `k` holds the meteorology at `t0 + 6k + 3 h` (span centers).
    pub met_central: Vec<GriddedField>,
    pub ems: GriddedField,
    pub t0: DateTime<Utc>,
}

impl ForecastInputs {
    /// Gather forecast inputs from a dataset at `anchor_hour`, which must
    /// leave `6 * steps` hours of meteorology ahead of it.
    pub fn from_dataset(ds: &CityDataset, stats: &NormStats, anchor_hour: usize, steps: usize) -> Result<Self> {
        if anchor_hour < STEP_HOURS {
            return Err(Error::InvalidInput(format!(
                "anchor hour {anchor_hour} leaves no room for the previous frame at {anchor_hour} - 6"
            )));
        }
        let x_prev = frame_at(ds, stats, anchor_hour - STEP_HOURS)?.ok_or_else(|| {
            Error::InsufficientData(format!(
                "initialization frame at hour {} has missing observations",
                anchor_hour - STEP_HOURS
            ))
        })?;
        let x_curr = frame_at(ds, stats, anchor_hour)?.ok_or_else(|| {
            Error::InsufficientData(format!(
                "initialization frame at hour {anchor_hour} has missing observations"
            ))
        })?;
        let mut met_step = Vec::with_capacity(steps);
        let mut met_central = Vec::with_capacity(steps);
        for k in 0..steps {
            let step_hour = anchor_hour + STEP_HOURS * (k + 1);
            let central_hour = anchor_hour + STEP_HOURS * k + 3;
            met_step.push(ds.met[ds.met_index(step_hour).map_err(|e| step_context(e, k + 1))?].clone());
            met_central.push(ds.met[ds.met_index(central_hour).map_err(|e| step_context(e, k + 1))?].clone());
        }
        let ems = ds.ems[ds.ems_index(anchor_hour)?].clone();
        Ok(Self { x_prev, x_curr, met_step, met_central, ems, t0: ds.time_at(anchor_hour) })
    }
}

fn step_context(e: Error, step: usize) -> Error {
    Error::MissingArtifact(format!("forecast step {step}: {e}"))
}

/// Full dual-scale forecast: 6-hour rollout, hourly infill between steps,
/// 6-hour frames inserted verbatim at their lead hours.
pub fn hourly_forecast(
    ctx: &ModelContext,
    store: &ParamStore,
    istore: &ParamStore,
    inputs: &ForecastInputs,
) -> Result<ForecastBundle> {
    let cfg = ctx.cfg();
    let steps = cfg.horizon_steps;
    let raw = rollout_raw(ctx, store, &inputs.x_prev, &inputs.x_curr, &inputs.met_step, &inputs.ems, inputs.t0, steps)?;
    let (n_s, nq) = (cfg.n_stations, cfg.n_quantiles());

    let mut lead_hours = Vec::with_capacity(STEP_HOURS * steps);
    let mut frames = Vec::with_capacity(STEP_HOURS * steps);
    let mut left = inputs.x_curr.clone();
    for k in 0..steps {
        let span_start = inputs.t0 + Duration::hours((STEP_HOURS * k) as i64);
        let central = span_start + Duration::hours(3);
        check_met_frame(&inputs.met_central, k, central, &format!("interpolation span {}", k + 1))?;
        let right = median_slice(&raw[k], cfg);
        let tc = encode_time(span_start);
        let interp =
            interpolate_frames(ctx, istore, &left, &right, &inputs.met_central[k], &inputs.ems, &tc)?;
        for j in 0..INTERP_FRAMES {
            let offset = (j * n_s * N_POLLUTANTS * nq, (j + 1) * n_s * N_POLLUTANTS * nq);
            let slice = Tensor::new(
                vec![n_s, N_POLLUTANTS, nq],
                interp.data()[offset.0..offset.1].to_vec(),
            )?;
            lead_hours.push((STEP_HOURS * k + j + 1) as u32);
            frames.push(emit_frame(&slice, &ctx.meta.norm, n_s, nq));
        }
        lead_hours.push((STEP_HOURS * (k + 1)) as u32);
        frames.push(emit_frame(&raw[k], &ctx.meta.norm, n_s, nq));
        left = right;
    }
    let bundle = ForecastBundle {
        init_time: inputs.t0,
        quantiles: cfg.quantiles.clone(),
        station_ids: ctx.station_ids(),
        lead_hours,
        frames,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// A trained model ready to forecast: context plus the 6-hour weights and,
/// when present, the interpolation weights.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub ctx: ModelContext,
    pub params: ParamStore,
    pub interp: Option<ParamStore>,
}

impl Forecaster {
    /// Write the weights and context under `dir` (`model6h/`, `interp/`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_value(&self.ctx.meta)?;
        checkpoint::save(&dir.join(SIX_HOUR_DIR), &self.params, meta.clone())?;
        if let Some(istore) = &self.interp {
            checkpoint::save(&dir.join(INTERP_DIR), istore, meta)?;
        }
        Ok(())
    }

    /// Load a model saved by [`Forecaster::save`]. The interpolator is
    /// optional; everything else must be present and consistent.
    pub fn load(dir: &Path) -> Result<Self> {
        let (params, meta_value) = checkpoint::load(&dir.join(SIX_HOUR_DIR))?;
        if meta_value.is_null() {
            return Err(Error::MissingArtifact(format!(
                "checkpoint under {} carries no model context",
                dir.display()
            )));
        }
        let meta: ModelMeta = serde_json::from_value(meta_value)?;
        let ctx = ModelContext::from_meta(meta)?;
        let interp_dir = dir.join(INTERP_DIR);
        let interp = if interp_dir.is_dir() {
            let (istore, _) = checkpoint::load(&interp_dir)?;
            Some(istore)
        } else {
            None
        };
        let fc = Self { ctx, params, interp };
        fc.check_shapes()?;
        Ok(fc)
    }

    fn check_shapes(&self) -> Result<()> {
        let cfg = self.ctx.cfg();
        let want = [cfg.head_rows_6h(), cfg.d_model];
        if self.params.get("head.w")?.shape() != want {
            return Err(Error::InvalidConfig(format!(
                "6-hour head has shape {:?}, expected {want:?}",
                self.params.get("head.w")?.shape()
            )));
        }
        if let Some(istore) = &self.interp {
            let want = [cfg.head_rows_interp(), cfg.d_model];
            if istore.get("head.w")?.shape() != want {
                return Err(Error::InvalidConfig(format!(
                    "interpolation head has shape {:?}, expected {want:?}",
                    istore.get("head.w")?.shape()
                )));
            }
        }
        Ok(())
    }

    /// 6-hour-only forecast from gathered inputs.
    pub fn rollout(&self, inputs: &ForecastInputs) -> Result<ForecastBundle> {
        rollout(
            &self.ctx,
            &self.params,
            &inputs.x_prev,
            &inputs.x_curr,
            &inputs.met_step,
            &inputs.ems,
            inputs.t0,
            self.ctx.cfg().horizon_steps,
        )
    }

    /// Hourly forecast; requires the interpolator.
    pub fn hourly(&self, inputs: &ForecastInputs) -> Result<ForecastBundle> {
        let istore = self.interp.as_ref().ok_or_else(|| {
            Error::MissingArtifact("hourly forecasting needs interpolation weights; none are loaded".into())
        })?;
        hourly_forecast(&self.ctx, &self.params, istore, inputs)
    }
}

/// A finished forecast: physical-unit quantile frames indexed by lead hour.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastBundle {
    pub init_time: DateTime<Utc>,
    pub quantiles: Vec<f64>,
    pub station_ids: Vec<String>,
    /// Strictly increasing lead hours; `frames[i]` is at `lead_hours[i]`.
    pub lead_hours: Vec<u32>,
    /// Each `[N_s x N_POLLUTANTS x Q]`, quantile axis sorted ascending.
    pub frames: Vec<Tensor>,
}

impl ForecastBundle {
    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn frame_at(&self, lead_hour: u32) -> Option<&Tensor> {
        let i = self.lead_hours.iter().position(|l| *l == lead_hour)?;
        Some(&self.frames[i])
    }

    pub fn value(&self, frame: usize, station: usize, pollutant: usize, quantile: usize) -> f64 {
        let nq = self.quantiles.len();
        self.frames[frame].data()[(station * N_POLLUTANTS + pollutant) * nq + quantile]
    }

    pub fn validate(&self) -> Result<()> {
        let (n_s, nq) = (self.station_ids.len(), self.quantiles.len());
        if n_s == 0 || nq == 0 {
            return Err(Error::InvalidInput("empty forecast bundle".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("forecast bundle has no frames".into()));
        }
        if self.lead_hours.len() != self.frames.len() {
            return Err(Error::InvalidInput(format!(
                "{} lead hours but {} frames",
                self.lead_hours.len(),
                self.frames.len()
            )));
        }
        if !self.lead_hours.windows(2).all(|w| w[0] < w[1]) || self.lead_hours.first() == Some(&0) {
            return Err(Error::InvalidInput("lead hours must be strictly increasing and positive".into()));
        }
        if !self.quantiles.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput("bundle quantiles must be strictly increasing".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != [n_s, N_POLLUTANTS, nq] {
                return Err(Error::ShapeMismatch {
                    op: "forecast_bundle",
                    detail: format!("frame {i} has shape {:?}", f.shape()),
                });
            }
            f.check_finite("forecast_bundle")?;
            for s in 0..n_s {
                for p in 0..N_POLLUTANTS {
                    for q in 1..nq {
                        let lo = f.data()[(s * N_POLLUTANTS + p) * nq + q - 1];
                        let hi = f.data()[(s * N_POLLUTANTS + p) * nq + q];
                        if lo > hi {
                            return Err(Error::InvalidInput(format!(
                                "quantiles cross at frame {i}, station {s}, pollutant {p}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Render as CSV: `init_time,station_id,pollutant,lead_hour,quantile,value`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(FORECAST_HEADER)?;
        let init = self.init_time.to_rfc3339_opts(SecondsFormat::Secs, true);
        for (i, lead) in self.lead_hours.iter().enumerate() {
            for (s, sid) in self.station_ids.iter().enumerate() {
                for (p, pol) in POLLUTANTS.iter().enumerate() {
                    for (q, tau) in self.quantiles.iter().enumerate() {
                        let lead_s = lead.to_string();
                        let tau_s = tau.to_string();
                        let value_s = self.value(i, s, p, q).to_string();
                        w.write_record([
                            init.as_str(),
                            sid.as_str(),
                            pol.name(),
                            lead_s.as_str(),
                            tau_s.as_str(),
                            value_s.as_str(),
                        ])?;
                    }
                }
            }
        }
        w.into_inner().map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        parse_forecast_csv(&bytes)
    }
}

pub const FORECAST_HEADER: [&str; 6] =
    ["init_time", "station_id", "pollutant", "lead_hour", "quantile", "value"];

const MAX_LEAD_HOUR: u32 = 1_000;
const MAX_BUNDLE_STATIONS: usize = 10_000;
const MAX_BUNDLE_QUANTILES: usize = 64;
const MAX_BUNDLE_CELLS: usize = 8_000_000;

/// Parse a forecast CSV back into a bundle. Rows may arrive in any order,
/// but the set must be complete and duplicate-free.
pub fn parse_forecast_csv(bytes: &[u8]) -> Result<ForecastBundle> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(|e| Error::Parse(format!("forecast csv: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != FORECAST_HEADER {
        return Err(Error::Parse(format!(
            "forecast csv header is {:?}, expected {FORECAST_HEADER:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }

    struct Row {
        station: String,
        pollutant: usize,
        lead: u32,
        qbits: u64,
        value: f64,
    }
    let mut init_time: Option<DateTime<Utc>> = None;
    let mut rows: Vec<Row> = Vec::new();
    let mut station_order: Vec<String> = Vec::new();
    let mut leads: Vec<u32> = Vec::new();
    let mut qbits_seen: Vec<u64> = Vec::new();

    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("forecast csv row {}: {e}", line + 2)))?;
        if record.len() != 6 {
            return Err(Error::Parse(format!(
                "forecast csv row {}: {} fields, expected 6",
                line + 2,
                record.len()
            )));
        }
        let t = DateTime::parse_from_rfc3339(&record[0])
            .map_err(|e| Error::Parse(format!("forecast csv row {}: init_time: {e}", line + 2)))?
            .with_timezone(&Utc);
        match init_time {
            None => init_time = Some(t),
            Some(t0) if t0 != t => {
                return Err(Error::Parse(format!(
                    "forecast csv row {}: init_time {} differs from {}",
                    line + 2,
                    record[0].to_string(),
                    t0.to_rfc3339_opts(SecondsFormat::Secs, true)
                )))
            }
            Some(_) => {}
        }
        let station = record[1].to_string();
        if station.is_empty() {
            return Err(Error::Parse(format!("forecast csv row {}: empty station id", line + 2)));
        }
        let pollutant = Pollutant::from_name(&record[2])
            .map_err(|_| {
                Error::Parse(format!("forecast csv row {}: unknown pollutant {:?}", line + 2, &record[2]))
            })?
            .index();
        let lead: u32 = record[3]
            .parse()
            .map_err(|e| Error::Parse(format!("forecast csv row {}: lead_hour: {e}", line + 2)))?;
        if lead == 0 || lead > MAX_LEAD_HOUR {
            return Err(Error::Parse(format!(
                "forecast csv row {}: lead_hour {lead} outside 1..={MAX_LEAD_HOUR}",
                line + 2
            )));
        }
        let tau: f64 = record[4]
            .parse()
            .map_err(|e| Error::Parse(format!("forecast csv row {}: quantile: {e}", line + 2)))?;
        if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
            return Err(Error::Parse(format!(
                "forecast csv row {}: quantile {tau} outside (0, 1)",
                line + 2
            )));
        }
        let value: f64 = record[5]
            .parse()
            .map_err(|e| Error::Parse(format!("forecast csv row {}: value: {e}", line + 2)))?;
        if !value.is_finite() {
            return Err(Error::Parse(format!("forecast csv row {}: non-finite value", line + 2)));
        }
        if !station_order.contains(&station) {
            if station_order.len() >= MAX_BUNDLE_STATIONS {
                return Err(Error::Parse(format!("more than {MAX_BUNDLE_STATIONS} stations")));
            }
            station_order.push(station.clone());
        }
        if !leads.contains(&lead) {
            leads.push(lead);
        }
        let qbits = tau.to_bits();
        if !qbits_seen.contains(&qbits) {
            if qbits_seen.len() >= MAX_BUNDLE_QUANTILES {
                return Err(Error::Parse(format!("more than {MAX_BUNDLE_QUANTILES} quantiles")));
            }
            qbits_seen.push(qbits);
        }
        rows.push(Row { station, pollutant, lead, qbits, value });
        let cells = station_order.len() * leads.len() * N_POLLUTANTS * qbits_seen.len();
        if cells > MAX_BUNDLE_CELLS {
            return Err(Error::Parse(format!("bundle exceeds {MAX_BUNDLE_CELLS} cells")));
        }
    }
    let init_time = init_time.ok_or_else(|| Error::Parse("forecast csv has no data rows".into()))?;

    leads.sort_unstable();
    let mut quantiles: Vec<f64> = qbits_seen.iter().map(|b| f64::from_bits(*b)).collect();
    quantiles.sort_by(|a, b| a.partial_cmp(b).expect("finite checked"));
    if !quantiles.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Parse("duplicate quantile levels".into()));
    }
    let (n_s, nq, nl) = (station_order.len(), quantiles.len(), leads.len());

    let mut frames = vec![vec![0.0; n_s * N_POLLUTANTS * nq]; nl];
    let mut seen = vec![vec![false; n_s * N_POLLUTANTS * nq]; nl];
    for row in &rows {
        let li = leads.binary_search(&row.lead).expect("collected above");
        let si = station_order.iter().position(|s| *s == row.station).expect("collected above");
        let tau = f64::from_bits(row.qbits);
        let qi = quantiles.iter().position(|q| *q == tau).expect("collected above");
        let idx = (si * N_POLLUTANTS + row.pollutant) * nq + qi;
        if seen[li][idx] {
            return Err(Error::Parse(format!(
                "duplicate forecast row: lead {}, station {:?}, pollutant {}, quantile {tau}",
                row.lead, row.station, row.pollutant
            )));
        }
        seen[li][idx] = true;
        frames[li][idx] = row.value;
    }
    for (li, flags) in seen.iter().enumerate() {
        if let Some(idx) = flags.iter().position(|f| !f) {
            return Err(Error::Parse(format!(
                "incomplete forecast: lead {} is missing station {:?}, pollutant index {}, quantile index {}",
                leads[li],
                station_order[idx / (N_POLLUTANTS * nq)],
                (idx / nq) % N_POLLUTANTS,
                idx % nq
            )));
        }
    }
    let bundle = ForecastBundle {
        init_time,
        quantiles,
        station_ids: station_order,
        lead_hours: leads,
        frames: frames
            .into_iter()
            .map(|d| Tensor::new(vec![n_s, N_POLLUTANTS, nq], d).expect("sized above"))
            .collect(),
    };
    bundle.validate().map_err(|e| Error::Parse(format!("forecast csv: {e}")))?;
    Ok(bundle)
}
