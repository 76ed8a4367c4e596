//! Central finite-difference verification of backpropagated gradients over
//! every parameter tensor of both model families.
//!
//! The check runs on a fixed synthetic probe so results depend only on the
//! configuration and the seed. It is restricted to micro configurations:
//! each parameter element costs two forward passes.

use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use rand::Rng;
use serde::Serialize;

use crate::data::types::{encode_time, ChannelStats, GriddedField, NormStats, Station, TimeCode, N_POLLUTANTS};
use crate::data::windows::WindowKind;
use crate::error::{Error, Result};
use crate::model::config::{init_6h_params, init_interp_params, ModelConfig, INTERP_FRAMES};
use crate::model::forecaster::{build_step_graph, GridGeometry, ModelContext, ModelMeta};
use crate::numerics::{ParamStore, Tensor};
use crate::seed::substream_rng;
use crate::train::loss::{expand_target_6h, expand_target_interp, quantile_loss_node, tau_rows};

/// Perturbation used by the central differences.
pub const FD_STEP: f64 = 1e-5;
/// A tensor whose worst element disagrees by more than this fails the check.
pub const FAIL_THRESHOLD: f64 = 1e-3;

const MAX_PROBE_STATIONS: usize = 2;
const MAX_PROBE_GRID: usize = 6;

/// Fixed synthetic inputs for one forward/backward pass of either family.
pub struct GradProbe {
    pub x_prev: Tensor,
    pub x_curr: Tensor,
    pub met: GriddedField,
    pub ems: GriddedField,
    pub tc: TimeCode,
    /// `[N_s x 6]`
    pub target_6h: Tensor,
    /// `[5 x N_s x 6]`
    pub target_interp: Tensor,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub fd_step: f64,
    /// Worst relative error per parameter tensor, keyed `family/name`.
    pub per_tensor: BTreeMap<String, f64>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// Tensors whose worst element exceeds the failure threshold.
    pub fn failures(&self) -> Vec<String> {
        self.per_tensor
            .iter()
            .filter(|(_, e)| **e > FAIL_THRESHOLD)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Deterministic context and inputs for gradient verification.
pub fn make_probe(cfg: &ModelConfig, seed: u64) -> Result<(ModelContext, GradProbe)> {
    cfg.validate()?;
    if cfg.n_stations > MAX_PROBE_STATIONS
        || cfg.grid_n_lat > MAX_PROBE_GRID
        || cfg.grid_n_lon > MAX_PROBE_GRID
    {
        return Err(Error::InvalidConfig(format!(
            "gradient verification needs a micro configuration (at most {MAX_PROBE_STATIONS} stations \
             on a {MAX_PROBE_GRID}x{MAX_PROBE_GRID} grid); got {} stations on {}x{}",
            cfg.n_stations, cfg.grid_n_lat, cfg.grid_n_lon
        )));
    }

    let grid = GridGeometry {
        origin_lat: 30.0,
        origin_lon: 120.0,
        resolution: 0.25,
        n_lat: cfg.grid_n_lat,
        n_lon: cfg.grid_n_lon,
    };
    let stations = (0..cfg.n_stations)
        .map(|s| Station {
            id: format!("probe{s}"),
            lat: grid.origin_lat + 0.3 + 0.4 * s as f64,
            lon: grid.origin_lon + 0.5 + 0.2 * s as f64,
        })
        .collect();
    let meta = ModelMeta {
        city: "gradcheck-probe".into(),
        model: cfg.clone(),
        stations,
        grid,
        norm: NormStats { mean: [25.0; N_POLLUTANTS], std: [8.0; N_POLLUTANTS] },
        met_stats: ChannelStats {
            mean: vec![0.1; cfg.met_channels],
            std: vec![1.4; cfg.met_channels],
        },
        ems_stats: ChannelStats {
            mean: vec![-0.2; cfg.ems_channels],
            std: vec![0.9; cfg.ems_channels],
        },
    };
    let ctx = ModelContext::from_meta(meta)?;

    let time = Utc.with_ymd_and_hms(2023, 6, 15, 12, 0, 0).unwrap();
    let mut rng = substream_rng(seed, "gradcheck/probe");
    let mut field = |label: &str, n_ch: usize| {
        let names = (0..n_ch).map(|c| format!("{label}{c}")).collect();
        let mut f = GriddedField::zeros(30.0, 120.0, 0.25, cfg.grid_n_lat, cfg.grid_n_lon, names, time);
        for c in 0..n_ch {
            for i in 0..cfg.grid_n_lat {
                for j in 0..cfg.grid_n_lon {
                    f.set(c, i, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        f
    };
    let met = field("met", cfg.met_channels);
    let ems = field("ems", cfg.ems_channels);

    let n_s = cfg.n_stations;
    let mut draw = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect()).expect("sized")
    };
    let probe = GradProbe {
        x_prev: draw(vec![n_s, N_POLLUTANTS]),
        x_curr: draw(vec![n_s, N_POLLUTANTS]),
        met,
        ems,
        tc: encode_time(time),
        target_6h: draw(vec![n_s, N_POLLUTANTS]),
        target_interp: draw(vec![INTERP_FRAMES, n_s, N_POLLUTANTS]),
    };
    Ok((ctx, probe))
}

fn probe_loss(
    ctx: &ModelContext,
    store: &ParamStore,
    probe: &GradProbe,
    head_rows: usize,
    target_mat: &Tensor,
    tau_mat: &Tensor,
) -> Result<f64> {
    let mut parts = build_step_graph(
        ctx,
        store,
        head_rows,
        &probe.x_prev,
        &probe.x_curr,
        &probe.met,
        &probe.ems,
        &probe.tc,
    )?;
    let loss = quantile_loss_node(&mut parts.graph, parts.output, target_mat, tau_mat)?;
    parts.graph.value(loss).scalar_value()
}

/// Compare backpropagated gradients against central differences for every
/// tensor in `store`. Returns the worst relative error per tensor.
pub fn check_store(
    ctx: &ModelContext,
    store: &ParamStore,
    kind: WindowKind,
    probe: &GradProbe,
    h: f64,
) -> Result<BTreeMap<String, f64>> {
    let cfg = ctx.cfg();
    let (head_rows, target_mat) = match kind {
        WindowKind::SixHour => (cfg.head_rows_6h(), expand_target_6h(&probe.target_6h, cfg.n_quantiles())?),
        WindowKind::Interp => {
            (cfg.head_rows_interp(), expand_target_interp(&probe.target_interp, cfg.n_quantiles())?)
        }
    };
    let tau_mat = tau_rows(head_rows, cfg.n_stations, &cfg.quantiles)?;

    let mut parts = build_step_graph(
        ctx,
        store,
        head_rows,
        &probe.x_prev,
        &probe.x_curr,
        &probe.met,
        &probe.ems,
        &probe.tc,
    )?;
    let loss_node = quantile_loss_node(&mut parts.graph, parts.output, &target_mat, &tau_mat)?;
    let analytic = parts.graph.backward(loss_node)?;

    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = BTreeMap::new();
    for name in names {
        let n = work.get(&name)?.len();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::GradCheck(format!("backward produced no gradient for {name:?}")))?
            .clone();
        let mut worst = 0.0f64;
        for i in 0..n {
            let base = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = base + h;
            let up = probe_loss(ctx, &work, probe, head_rows, &target_mat, &tau_mat)?;
            work.get_mut(&name)?.data_mut()[i] = base - h;
            let down = probe_loss(ctx, &work, probe, head_rows, &target_mat, &tau_mat)?;
            work.get_mut(&name)?.data_mut()[i] = base;
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
            }
        }
        report.insert(name, worst);
    }
    Ok(report)
}

/// Verify both model families at a random initialization. Errors when any
/// tensor's worst element exceeds the failure threshold, listing the
/// offending tensors.
pub fn verify_gradients(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let (ctx, probe) = make_probe(cfg, seed)?;
    let mut per_tensor = BTreeMap::new();
    for (family, kind, store) in [
        ("six_hour", WindowKind::SixHour, init_6h_params(cfg, seed)?),
        ("interp", WindowKind::Interp, init_interp_params(cfg, seed)?),
    ] {
        for (name, err) in check_store(&ctx, &store, kind, &probe, FD_STEP)? {
            per_tensor.insert(format!("{family}/{name}"), err);
        }
    }
    let max_rel_err = per_tensor.values().cloned().fold(0.0, f64::max);
    let report = GradCheckReport { seed, fd_step: FD_STEP, per_tensor, max_rel_err };
    let failures = report.failures();
    if !failures.is_empty() {
        return Err(Error::GradCheck(format!(
            "{} tensors exceed relative error {FAIL_THRESHOLD}: {}",
            failures.len(),
            failures.join(", ")
        )));
    }
    Ok(report)
}
