//! Chronological holdout evaluation: train on the early part of the
//! timeline, initialize forecasts in the withheld tail, and score them
//! against the observations there. Pooled errors are computed in
//! standardized units so the six pollutants weigh equally.

use std::collections::BTreeMap;

use crate::data::dataset::CityDataset;
use crate::data::types::N_POLLUTANTS;
use crate::data::windows::{build_windows, SampleWindow, WindowKind};
use crate::error::{Error, Result};
use crate::eval::report::collect_pairs;
use crate::model::config::{INTERP_FRAMES, STEP_HOURS};
use crate::model::forecaster::{
    interpolate_frames, rollout, ForecastBundle, ForecastInputs, ModelContext,
};
use crate::numerics::ParamStore;

/// Hour index where the held-out tail begins: the last `eval_fraction` of
/// the timeline, rounded so the tail gets the leftover hour.
pub fn split_hour(ds: &CityDataset, eval_fraction: f64) -> Result<usize> {
    if !eval_fraction.is_finite() || eval_fraction <= 0.0 || eval_fraction >= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "eval fraction must lie strictly between 0 and 1, got {eval_fraction}"
        )));
    }
    let split = (ds.hours as f64 * (1.0 - eval_fraction)).floor() as usize;
    // Either side needs a full 13-hour span: a training window before the
    // split, one single-step initialization after it.
    if split < 13 || ds.hours - split < 13 {
        return Err(Error::InsufficientData(format!(
            "splitting {} hours at hour {split} leaves too little data on one side",
            ds.hours
        )));
    }
    Ok(split)
}

/// Training windows that read only hours strictly before `split`. Both
/// window kinds touch hours up to `anchor + 6`, so that is the cutoff.
pub fn train_windows(
    ds: &CityDataset,
    ctx: &ModelContext,
    kind: WindowKind,
    stride: usize,
    split: usize,
) -> Result<Vec<SampleWindow>> {
    let all = build_windows(ds, &ctx.meta.norm, kind, stride)?;
    let keep: Vec<SampleWindow> =
        all.into_iter().filter(|w| w.anchor_hour + STEP_HOURS < split).collect();
    if keep.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no complete {kind:?} training windows before hour {split}"
        )));
    }
    Ok(keep)
}

/// Forecast initialization hours confined to the held-out tail: both input
/// frames at or after `split`, the whole horizon inside the dataset, spaced
/// by `stride` and capped at `max_inits`.
pub fn eval_anchors(
    ds: &CityDataset,
    split: usize,
    steps: usize,
    stride: usize,
    max_inits: usize,
) -> Result<Vec<usize>> {
    if stride == 0 || steps == 0 || max_inits == 0 {
        return Err(Error::InvalidInput(format!(
            "anchor enumeration needs stride, steps and max_inits >= 1, got {stride}/{steps}/{max_inits}"
        )));
    }
    let mut out = Vec::new();
    let mut t = split + STEP_HOURS;
    while t + STEP_HOURS * steps < ds.hours && out.len() < max_inits {
        out.push(t);
        t += stride;
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no room for a {steps}-step forecast initialized after hour {split} in {} hours",
            ds.hours
        )));
    }
    Ok(out)
}

/// Roll one bundle per anchor. Anchors whose initialization frames have
/// gaps are skipped; anything else that goes wrong aborts.
pub fn rollout_bundles(
    ctx: &ModelContext,
    store: &ParamStore,
    ds: &CityDataset,
    anchors: &[usize],
    steps: usize,
) -> Result<Vec<ForecastBundle>> {
    let mut out = Vec::with_capacity(anchors.len());
    for &t in anchors {
        match ForecastInputs::from_dataset(ds, &ctx.meta.norm, t, steps) {
            Ok(inp) => out.push(rollout(
                ctx,
                store,
                &inp.x_prev,
                &inp.x_curr,
                &inp.met_step,
                &inp.ems,
                inp.t0,
                steps,
            )?),
            Err(Error::InsufficientData(why)) => {
                log::debug!("skipping initialization at hour {t}: {why}")
            }
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!(
            "all {} candidate initializations had incomplete input frames",
            anchors.len()
        )));
    }
    if out.len() < anchors.len() {
        log::info!("rolled {} of {} candidate initializations", out.len(), anchors.len());
    }
    Ok(out)
}

/// Median-track RMSE pooled over every (pollutant, lead, station, bundle)
/// pair, with each residual divided by the pollutant's historical standard
/// deviation.
pub fn pooled_normalized_rmse(bundles: &[ForecastBundle], ds: &CityDataset) -> Result<f64> {
    let norm = ds.norm_stats()?;
    let pairs = collect_pairs(bundles, ds)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, _), v) in pairs.iter() {
        let sd = norm.std[*p];
        for &(pred, obs) in v {
            let d = (pred - obs) / sd;
            sum += d * d;
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "pooled error needs at least 2 scored pairs, found {n}"
        )));
    }
    Ok((sum / n as f64).sqrt())
}

/// Standardized RMSE per lead hour, pooled across pollutants, stations and
/// bundles. Leads with fewer than two pairs are dropped.
pub fn lead_rmse_curve(bundles: &[ForecastBundle], ds: &CityDataset) -> Result<Vec<(u32, f64)>> {
    let norm = ds.norm_stats()?;
    let pairs = collect_pairs(bundles, ds)?;
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for ((p, lead), v) in pairs.iter() {
        let sd = norm.std[*p];
        let e = acc.entry(*lead).or_insert((0.0, 0));
        for &(pred, obs) in v {
            let d = (pred - obs) / sd;
            e.0 += d * d;
            e.1 += 1;
        }
    }
    let curve: Vec<(u32, f64)> = acc
        .into_iter()
        .filter(|(_, (_, n))| *n >= 2)
        .map(|(lead, (sum, n))| (lead, (sum / n as f64).sqrt()))
        .collect();
    if curve.is_empty() {
        return Err(Error::InsufficientData("no lead hour collected 2 or more pairs".into()));
    }
    Ok(curve)
}

/// Bracketing windows whose hours all fall in the held-out tail.
pub fn holdout_interp_windows(
    ds: &CityDataset,
    ctx: &ModelContext,
    stride: usize,
    split: usize,
) -> Result<Vec<SampleWindow>> {
    let all = build_windows(ds, &ctx.meta.norm, WindowKind::Interp, stride)?;
    let keep: Vec<SampleWindow> = all.into_iter().filter(|w| w.anchor_hour >= split).collect();
    if keep.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no complete bracketing windows at or after hour {split}"
        )));
    }
    Ok(keep)
}

/// Compare the model's median infill against straight-line interpolation
/// between the same brackets, over standardized held-out windows. Returns
/// `(model_rmse, linear_rmse)`.
pub fn interp_vs_linear(
    ctx: &ModelContext,
    istore: &ParamStore,
    ds: &CityDataset,
    windows: &[SampleWindow],
) -> Result<(f64, f64)> {
    let cfg = ctx.cfg();
    let (n_s, nq, mi) = (cfg.n_stations, cfg.n_quantiles(), cfg.median_index());
    let mut sum_model = 0.0;
    let mut sum_linear = 0.0;
    let mut n = 0usize;
    for w in windows {
        if w.kind != WindowKind::Interp {
            return Err(Error::InvalidInput(format!(
                "interpolation comparison got a {:?} window at hour {}",
                w.kind, w.anchor_hour
            )));
        }
        let pred = interpolate_frames(
            ctx,
            istore,
            &w.x_prev,
            &w.x_curr,
            &ds.met[w.met_idx],
            &ds.ems[w.ems_idx],
            &w.timecode,
        )?;
        for k in 0..INTERP_FRAMES {
            let frac = (k + 1) as f64 / STEP_HOURS as f64;
            for s in 0..n_s {
                for p in 0..N_POLLUTANTS {
                    let obs = w.target.at3(k, s, p);
                    let model = pred.data()[((k * n_s + s) * N_POLLUTANTS + p) * nq + mi];
                    let line = w.x_prev.at2(s, p) * (1.0 - frac) + w.x_curr.at2(s, p) * frac;
                    sum_model += (model - obs) * (model - obs);
                    sum_linear += (line - obs) * (line - obs);
                    n += 1;
                }
            }
        }
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "interpolation comparison needs at least 2 scored values, found {n}"
        )));
    }
    Ok(((sum_model / n as f64).sqrt(), (sum_linear / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::init_6h_params;
    use crate::model::config::init_interp_params;
    use crate::numerics::Tensor;
    use crate::testutil::{micro_context, micro_dataset};

    #[test]
    fn split_leaves_the_requested_tail() {
        let ds = micro_dataset();
        assert_eq!(ds.hours, 288);
        assert_eq!(split_hour(&ds, 0.25).unwrap(), 216);
        assert_eq!(split_hour(&ds, 0.5).unwrap(), 144);
    }

    #[test]
    fn degenerate_fractions_are_rejected() {
        let ds = micro_dataset();
        for f in [0.0, 1.0, -0.3, 2.0, f64::NAN] {
            assert!(matches!(split_hour(&ds, f), Err(Error::InvalidConfig(_))), "fraction {f}");
        }
        // 1% of 288 hours rounds to a 2-hour tail: not enough to forecast in
        assert!(matches!(split_hour(&ds, 0.01), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn training_windows_never_touch_the_tail() {
        let ds = micro_dataset();
        let ctx = micro_context(&ds);
        let split = split_hour(&ds, 0.25).unwrap();
        let ws = train_windows(&ds, &ctx, WindowKind::SixHour, 1, split).unwrap();
        assert!(!ws.is_empty());
        assert!(ws.iter().all(|w| w.anchor_hour + 6 < split));
        // the unfiltered enumeration reaches anchors past the split
        let all = build_windows(&ds, &ctx.meta.norm, WindowKind::SixHour, 1).unwrap();
        assert!(all.iter().any(|w| w.anchor_hour + 6 >= split));
        assert!(ws.len() < all.len());
    }

    #[test]
    fn anchors_fit_inside_the_tail() {
        let ds = micro_dataset();
        let split = 216;
        let anchors = eval_anchors(&ds, split, 1, 6, 100).unwrap();
        assert_eq!(anchors.first(), Some(&222));
        assert!(anchors.iter().all(|&t| t - 6 >= split && t + 6 < ds.hours));
        let capped = eval_anchors(&ds, split, 1, 6, 3).unwrap();
        assert_eq!(capped, anchors[..3].to_vec());
        // a 12-step horizon needs 72 hours of tail plus the lead-in
        assert!(matches!(eval_anchors(&ds, split, 12, 6, 100), Err(Error::InsufficientData(_))));
        assert!(matches!(eval_anchors(&ds, split, 1, 0, 100), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bundles_score_to_a_finite_pooled_error() {
        let ds = micro_dataset();
        let ctx = micro_context(&ds);
        let store = init_6h_params(ctx.cfg(), 11).unwrap();
        let split = split_hour(&ds, 0.25).unwrap();
        let anchors = eval_anchors(&ds, split, 4, 12, 4).unwrap();
        let bundles = rollout_bundles(&ctx, &store, &ds, &anchors, 4).unwrap();
        assert_eq!(bundles.len(), anchors.len());
        let rmse = pooled_normalized_rmse(&bundles, &ds).unwrap();
        assert!(rmse.is_finite() && rmse > 0.0);
    }

    #[test]
    fn lead_curve_has_one_point_per_step() {
        let ds = micro_dataset();
        let ctx = micro_context(&ds);
        let store = init_6h_params(ctx.cfg(), 11).unwrap();
        let anchors = eval_anchors(&ds, 216, 4, 12, 3).unwrap();
        let bundles = rollout_bundles(&ctx, &store, &ds, &anchors, 4).unwrap();
        let curve = lead_rmse_curve(&bundles, &ds).unwrap();
        assert_eq!(curve.iter().map(|(l, _)| *l).collect::<Vec<_>>(), vec![6, 12, 18, 24]);
        assert!(curve.iter().all(|(_, r)| r.is_finite() && *r > 0.0));
        // pooling the same pairs both ways must agree on the overall scale
        let pooled = pooled_normalized_rmse(&bundles, &ds).unwrap();
        let lo = curve.iter().map(|(_, r)| *r).fold(f64::INFINITY, f64::min);
        let hi = curve.iter().map(|(_, r)| *r).fold(0.0, f64::max);
        assert!(pooled >= lo && pooled <= hi);
    }

    #[test]
    fn linear_targets_make_the_baseline_exact() {
        let ds = micro_dataset();
        let ctx = micro_context(&ds);
        let istore = init_interp_params(ctx.cfg(), 5).unwrap();
        let split = split_hour(&ds, 0.25).unwrap();
        let mut ws = holdout_interp_windows(&ds, &ctx, 6, split).unwrap();
        assert!(ws.iter().all(|w| w.anchor_hour >= split));
        // overwrite the targets with the straight line between the brackets
        for w in &mut ws {
            let mut t = Tensor::zeros(&[5, 2, N_POLLUTANTS]);
            for k in 0..5 {
                let frac = (k + 1) as f64 / 6.0;
                for s in 0..2 {
                    for p in 0..N_POLLUTANTS {
                        t.set3(k, s, p, w.x_prev.at2(s, p) * (1.0 - frac) + w.x_curr.at2(s, p) * frac);
                    }
                }
            }
            w.target = t;
        }
        let (model, linear) = interp_vs_linear(&ctx, &istore, &ds, &ws).unwrap();
        assert!(linear.abs() < 1e-12);
        assert!(model > linear);
    }

    #[test]
    fn six_hour_windows_are_refused_by_the_comparison() {
        let ds = micro_dataset();
        let ctx = micro_context(&ds);
        let istore = init_interp_params(ctx.cfg(), 5).unwrap();
        let ws = build_windows(&ds, &ctx.meta.norm, WindowKind::SixHour, 24).unwrap();
        assert!(matches!(
            interp_vs_linear(&ctx, &istore, &ds, &ws),
            Err(Error::InvalidInput(_))
        ));
    }
}
