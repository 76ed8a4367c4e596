//! Mini-batch quantile training for the 6-hour and interpolation models.
//!
//! The loop is deterministic end to end: parameter init, epoch shuffles, and
//! batch gradient accumulation all derive from named substreams of the
//! training seed, so a rerun with the same inputs reproduces every loss to
//! the bit.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::dataset::CityDataset;
use crate::data::types::{encode_time, N_POLLUTANTS};
use crate::data::windows::{frame_at, SampleWindow, WindowKind};
use crate::error::{Error, Result};
use crate::model::config::{init_6h_params, init_interp_params};
use crate::model::forecaster::{build_step_graph, ModelContext};
use crate::numerics::{AdamConfig, Gradients, ParamStore, Tensor};
use crate::seed::substream_rng;
use crate::train::loss::{expand_target_6h, expand_target_interp, quantile_loss_node, tau_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Adam learning rate. Zero is allowed and makes the run a controlled
    /// no-op on parameters.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Must equal the model configuration's quantile levels.
    pub quantiles: Vec<f64>,
    pub seed: u64,
    /// Epochs without a new best validation loss before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    /// Global L2 norm ceiling applied to each averaged batch gradient.
    pub clip_norm: f64,
    /// Fraction of windows (chronologically last) held out for validation.
    pub val_fraction: f64,
    /// Autoregressive steps per 6-hour window. The default 1 is plain
    /// teacher forcing; larger values chain extra steps by feeding back the
    /// median prediction, with gradients stopped at the feedback.
    pub unroll_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            epochs: 50,
            quantiles: vec![0.1, 0.5, 0.9],
            seed: 0,
            patience: 0,
            clip_norm: 1.0,
            val_fraction: 0.1,
            unroll_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.lr.is_finite() || self.lr < 0.0 {
            problems.push(format!("lr {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if self.quantiles.is_empty()
            || !self.quantiles.iter().all(|q| q.is_finite() && *q > 0.0 && *q < 1.0)
            || !self.quantiles.windows(2).all(|w| w[0] < w[1])
        {
            problems.push(format!("quantiles {:?} must be strictly increasing within (0, 1)", self.quantiles));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            problems.push(format!("clip_norm {} must be finite and positive", self.clip_norm));
        }
        if !self.val_fraction.is_finite() || self.val_fraction <= 0.0 || self.val_fraction >= 1.0 {
            problems.push(format!("val_fraction {} must lie in (0, 1)", self.val_fraction));
        }
        if self.unroll_steps == 0 {
            problems.push("unroll_steps must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub seed: u64,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
    /// Mean train loss per epoch, in epoch order.
    pub train_loss: Vec<f64>,
    /// Mean validation loss per epoch, in epoch order.
    pub val_loss: Vec<f64>,
    /// Epoch index (into the vectors above) whose parameters are returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint_id: String,
    pub stopped_early: bool,
    /// Measured duration; excluded from serialization so that written
    /// artifacts depend only on seeds and inputs.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Train the 6-hour prediction model. Windows must all be of the six-hour
/// kind; the chronologically last `val_fraction` of them form the validation
/// split. Returns the best-validation parameters and the loss history.
pub fn train_6h(
    ctx: &ModelContext,
    ds: &CityDataset,
    windows: &[SampleWindow],
    tcfg: &TrainConfig,
) -> Result<(ParamStore, TrainReport)> {
    train_model(ctx, ds, windows, tcfg, WindowKind::SixHour)
}

/// Train the hourly interpolation model on five-hour infill targets.
pub fn train_interp(
    ctx: &ModelContext,
    ds: &CityDataset,
    windows: &[SampleWindow],
    tcfg: &TrainConfig,
) -> Result<(ParamStore, TrainReport)> {
    train_model(ctx, ds, windows, tcfg, WindowKind::Interp)
}

fn kind_label(kind: WindowKind) -> &'static str {
    match kind {
        WindowKind::SixHour => "six_hour",
        WindowKind::Interp => "interp",
    }
}

fn train_model(
    ctx: &ModelContext,
    ds: &CityDataset,
    windows: &[SampleWindow],
    tcfg: &TrainConfig,
    kind: WindowKind,
) -> Result<(ParamStore, TrainReport)> {
    tcfg.validate()?;
    let cfg = ctx.cfg();
    let label = kind_label(kind);
    if tcfg.quantiles != cfg.quantiles {
        return Err(Error::InvalidConfig(format!(
            "training quantiles {:?} differ from model quantiles {:?}",
            tcfg.quantiles, cfg.quantiles
        )));
    }
    if kind == WindowKind::Interp && tcfg.unroll_steps != 1 {
        return Err(Error::InvalidConfig(
            "unroll_steps applies to the six-hour model only".into(),
        ));
    }
    if let Some(w) = windows.iter().find(|w| w.kind != kind) {
        return Err(Error::InvalidInput(format!(
            "window at hour {} is {:?} but this trainer expects {kind:?}",
            w.anchor_hour, w.kind
        )));
    }
    if windows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} windows given; training needs at least 2 to split off validation",
            windows.len()
        )));
    }
    for w in windows {
        if w.x_curr.shape() != [cfg.n_stations, N_POLLUTANTS] {
            return Err(Error::ShapeMismatch {
                op: "train",
                detail: format!(
                    "window at hour {} has x_curr {:?}, model expects [{}, {N_POLLUTANTS}]",
                    w.anchor_hour,
                    w.x_curr.shape(),
                    cfg.n_stations
                ),
            });
        }
    }

    let mut order: Vec<&SampleWindow> = windows.iter().collect();
    order.sort_by_key(|w| w.anchor_hour);
    let n_val = (((order.len() as f64) * tcfg.val_fraction).round() as usize).clamp(1, order.len() - 1);
    let (train_w, val_w) = order.split_at(order.len() - n_val);

    let head_rows = match kind {
        WindowKind::SixHour => cfg.head_rows_6h(),
        WindowKind::Interp => cfg.head_rows_interp(),
    };
    let tau_mat = tau_rows(head_rows, cfg.n_stations, &tcfg.quantiles)?;
    let mut params = match kind {
        WindowKind::SixHour => init_6h_params(cfg, tcfg.seed)?,
        WindowKind::Interp => init_interp_params(cfg, tcfg.seed)?,
    };
    let adam = AdamConfig { lr: tcfg.lr, ..AdamConfig::default() };

    let started = Instant::now();
    let mut train_curve = Vec::with_capacity(tcfg.epochs);
    let mut val_curve = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stopped_early = false;

    for epoch in 0..tcfg.epochs {
        let mut idx: Vec<usize> = (0..train_w.len()).collect();
        idx.shuffle(&mut substream_rng(tcfg.seed, &format!("train/{label}/epoch/{epoch}")));

        // summed in window order, not shuffle order, so the epoch loss is
        // identical across reruns with different batch layouts
        let mut window_loss = vec![0.0; train_w.len()];
        for chunk in idx.chunks(tcfg.batch_size) {
            let mut acc = Gradients::new();
            for &wi in chunk {
                let (loss, grads) =
                    window_pass(ctx, ds, &params, train_w[wi], kind, head_rows, &tau_mat, tcfg.unroll_steps, true)
                        .map_err(|e| diverged(e, epoch, Some(train_w[wi].anchor_hour)))?;
                window_loss[wi] = loss;
                for (name, g) in grads.expect("requested gradients") {
                    match acc.get_mut(&name) {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in acc.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            ParamStore::clip_grads(&mut acc, tcfg.clip_norm);
            params.adam_step(&acc, &adam).map_err(|e| diverged(e, epoch, None))?;
        }
        let train_loss = window_loss.iter().sum::<f64>() / train_w.len() as f64;

        let mut val_sum = 0.0;
        for w in val_w {
            let (loss, _) = window_pass(ctx, ds, &params, w, kind, head_rows, &tau_mat, tcfg.unroll_steps, false)
                .map_err(|e| diverged(e, epoch, Some(w.anchor_hour)))?;
            val_sum += loss;
        }
        let val_loss = val_sum / val_w.len() as f64;

        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: train loss {train_loss}, validation loss {val_loss}"
            )));
        }
        train_curve.push(train_loss);
        val_curve.push(val_loss);
        log::debug!("{label} epoch {epoch}: train {train_loss:.6}, val {val_loss:.6}");

        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, params.clone()));
        } else if tcfg.patience > 0 {
            let since = epoch - best.as_ref().expect("set on first epoch").0;
            if since >= tcfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch ran");
    let report = TrainReport {
        kind: label.to_string(),
        seed: tcfg.seed,
        n_train_windows: train_w.len(),
        n_val_windows: val_w.len(),
        train_loss: train_curve,
        val_loss: val_curve,
        best_epoch,
        best_val_loss,
        checkpoint_id: format!("{label}-seed{}-epoch{}", tcfg.seed, best_epoch),
        stopped_early,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((best_params, report))
}

fn diverged(e: Error, epoch: usize, anchor: Option<usize>) -> Error {
    match e {
        Error::NonFinite { .. } => {
            let wh = anchor.map(|h| format!(" (window at hour {h})")).unwrap_or_default();
            Error::Diverged(format!("epoch {epoch}{wh}: {e}"))
        }
        other => other,
    }
}

/// Loss (and, when asked, parameter gradients) for one window. For unrolled
/// six-hour windows the extra targets and meteorology frames come from the
/// dataset; the median prediction is fed to the next step as a constant.
#[allow(clippy::too_many_arguments)]
fn window_pass(
    ctx: &ModelContext,
    ds: &CityDataset,
    params: &ParamStore,
    w: &SampleWindow,
    kind: WindowKind,
    head_rows: usize,
    tau_mat: &Tensor,
    unroll_steps: usize,
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    let cfg = ctx.cfg();
    let nq = cfg.n_quantiles();
    let steps = if kind == WindowKind::SixHour { unroll_steps } else { 1 };

    let mut x_prev = w.x_prev.clone();
    let mut x_curr = w.x_curr.clone();
    let mut loss_sum = 0.0;
    let mut acc: Option<Gradients> = want_grads.then(Gradients::new);

    for step in 0..steps {
        let (target_mat, met_idx, ems_idx, tc) = if step == 0 {
            let tm = match kind {
                WindowKind::SixHour => expand_target_6h(&w.target, nq)?,
                WindowKind::Interp => expand_target_interp(&w.target, nq)?,
            };
            (tm, w.met_idx, w.ems_idx, w.timecode.clone())
        } else {
            let target_hour = w.anchor_hour + 6 * (step + 1);
            if target_hour >= ds.hours {
                return Err(Error::InsufficientData(format!(
                    "window at hour {} cannot unroll step {}: dataset ends at hour {}",
                    w.anchor_hour, step + 1, ds.hours
                )));
            }
            let target = frame_at(ds, &ctx.meta.norm, target_hour)?.ok_or_else(|| {
                Error::InsufficientData(format!(
                    "window at hour {} cannot unroll step {}: hour {target_hour} has invalid observations",
                    w.anchor_hour,
                    step + 1
                ))
            })?;
            (
                expand_target_6h(&target, nq)?,
                ds.met_index(target_hour)?,
                w.ems_idx,
                encode_time(ds.time_at(w.anchor_hour + 6 * step)),
            )
        };

        let mut parts =
            build_step_graph(ctx, params, head_rows, &x_prev, &x_curr, &ds.met[met_idx], &ds.ems[ems_idx], &tc)?;
        let loss_node = quantile_loss_node(&mut parts.graph, parts.output, &target_mat, tau_mat)?;
        loss_sum += parts.graph.value(loss_node).scalar_value()?;

        if let Some(acc) = acc.as_mut() {
            for (name, g) in parts.graph.backward(loss_node)? {
                match acc.get_mut(&name) {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }

        if step + 1 < steps {
            let out = parts.graph.value(parts.output);
            let mi = cfg.median_index();
            let median = Tensor::from_fn2(cfg.n_stations, N_POLLUTANTS, |s, p| out.at2(p * nq + mi, s));
            x_prev = x_curr;
            x_curr = median;
        }
    }

    let inv = 1.0 / steps as f64;
    if let Some(acc) = acc.as_mut() {
        if steps > 1 {
            for g in acc.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
        }
    }
    Ok((loss_sum * inv, acc))
}
