//! One executor per subcommand. Each takes a validated run configuration,
//! writes its artifacts under `out`, appends log lines, and returns the
//! resolved configuration (derived fields filled in) for `config.json`.

use std::fs;
use std::path::Path;

use serde_json::json;

use aircast_core::data::synth::synth_generate;
use aircast_core::data::{CityDataset, WindowKind};
use aircast_core::eval;
use aircast_core::eval::holdout::{eval_anchors, rollout_bundles, train_windows};
use aircast_core::eval::AblationArm;
use aircast_core::model::forecaster::ForecastInputs;
use aircast_core::model::{Forecaster, ModelConfig, ModelContext};
use aircast_core::run::{
    fit_model_to_dataset, AblateRun, EvaluateRun, ForecastRun, GradcheckRun, PlotRun, RunConfig,
    SynthRun, TrainInterpRun, TrainRun,
};
use aircast_core::train::{train_6h, verify_gradients, TrainReport};
use aircast_core::{Error, Result};

fn load_city(data: &Path, city: &str) -> Result<CityDataset> {
    let dir = data.join(city);
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(format!("no dataset directory at {}", dir.display())));
    }
    CityDataset::load(&dir, city)
}

/// The model a run uses: the explicit one when given, otherwise the default
/// architecture fitted to the dataset's shapes, carrying the run's quantiles
/// and seed.
fn resolve_model(
    explicit: &Option<ModelConfig>,
    quantiles: &[f64],
    seed: u64,
    ds: &CityDataset,
) -> Result<ModelConfig> {
    match explicit {
        Some(m) => Ok(m.clone()),
        None => {
            let base =
                ModelConfig { quantiles: quantiles.to_vec(), seed, ..ModelConfig::default() };
            fit_model_to_dataset(&base, ds)
        }
    }
}

fn check_checkpoint(fc: &Forecaster, city: &str, ds: &CityDataset) -> Result<()> {
    if fc.ctx.meta.city != city {
        return Err(Error::InvalidConfig(format!(
            "checkpoint was trained on city {:?}, run asks for {city:?}",
            fc.ctx.meta.city
        )));
    }
    if fc.ctx.meta.stations != ds.stations() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint stations do not match the dataset for city {city:?}"
        )));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn log_training(log: &mut Vec<String>, report: &TrainReport) {
    log.push(format!(
        "trained {} epochs ({} train windows, {} validation), best validation loss {:.6} at epoch {}{}",
        report.train_loss.len(),
        report.n_train_windows,
        report.n_val_windows,
        report.best_val_loss,
        report.best_epoch,
        if report.stopped_early { ", stopped early" } else { "" },
    ));
}

pub fn synth(r: SynthRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let cities = synth_generate(&r.synth, r.synth.seed)?;
    let data = out.join("data");
    for ds in &cities {
        ds.save(&data.join(&ds.city))?;
        log.push(format!(
            "wrote {}: {} stations, {} hours, {} meteorology frames",
            ds.city,
            ds.n_stations(),
            ds.hours,
            ds.met.len()
        ));
    }
    Ok(RunConfig::Synth(r))
}

pub fn train(mut r: TrainRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let ds = load_city(&r.data, &r.city)?;
    let model = resolve_model(&r.model, &r.train.quantiles, r.train.seed, &ds)?;
    let ctx = ModelContext::from_dataset(&model, &ds)?;
    let split = eval::split_hour(&ds, r.eval_fraction)?;
    let windows = train_windows(&ds, &ctx, WindowKind::SixHour, r.train_stride, split)?;
    log.push(format!(
        "training on {}: {} six-hour windows before hour {split}",
        r.city,
        windows.len()
    ));
    let (params, report) = train_6h(&ctx, &ds, &windows, &r.train)?;
    log_training(log, &report);
    Forecaster { ctx, params, interp: None }.save(&out.join("checkpoint"))?;
    write_json(&out.join("train_report.json"), &report)?;
    r.model = Some(model);
    Ok(RunConfig::Train(r))
}

pub fn train_interp(r: TrainInterpRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let ds = load_city(&r.data, &r.city)?;
    let fc = Forecaster::load(&r.checkpoint)?;
    check_checkpoint(&fc, &r.city, &ds)?;
    let split = eval::split_hour(&ds, r.eval_fraction)?;
    let windows = train_windows(&ds, &fc.ctx, WindowKind::Interp, r.train_stride, split)?;
    log.push(format!(
        "training interpolator on {}: {} bracketing windows before hour {split}",
        r.city,
        windows.len()
    ));
    let (istore, report) = aircast_core::train::train_interp(&fc.ctx, &ds, &windows, &r.train)?;
    log_training(log, &report);
    Forecaster { ctx: fc.ctx, params: fc.params, interp: Some(istore) }
        .save(&out.join("checkpoint"))?;
    write_json(&out.join("train_report.json"), &report)?;
    Ok(RunConfig::TrainInterp(r))
}

pub fn forecast(r: ForecastRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let ds = load_city(&r.data, &r.city)?;
    let mut fc = Forecaster::load(&r.checkpoint)?;
    check_checkpoint(&fc, &r.city, &ds)?;
    fc.ctx.meta.model.horizon_steps = r.steps;
    let inputs = ForecastInputs::from_dataset(&ds, &fc.ctx.meta.norm, r.anchor_hour, r.steps)?;
    let bundle = if fc.interp.is_some() { fc.hourly(&inputs)? } else { fc.rollout(&inputs)? };
    log.push(format!(
        "forecast initialized {} (hour {}), {} resolution, {} frames to lead hour {}",
        bundle.init_time.to_rfc3339(),
        r.anchor_hour,
        if fc.interp.is_some() { "hourly" } else { "six-hour" },
        bundle.frames.len(),
        bundle.lead_hours.last().copied().unwrap_or(0),
    ));
    bundle.save_csv(&out.join("forecast.csv"))?;
    Ok(RunConfig::Forecast(r))
}

pub fn evaluate(r: EvaluateRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let ds = load_city(&r.data, &r.city)?;
    let fc = Forecaster::load(&r.checkpoint)?;
    check_checkpoint(&fc, &r.city, &ds)?;
    let split = eval::split_hour(&ds, r.eval_fraction)?;
    let anchors = eval_anchors(&ds, split, r.steps, r.init_stride, r.max_inits)?;
    let bundles = rollout_bundles(&fc.ctx, &fc.params, &ds, &anchors, r.steps)?;
    let report = eval::window_report(&bundles, &ds)?;
    let pooled = eval::pooled_normalized_rmse(&bundles, &ds)?;
    let curve = eval::lead_rmse_curve(&bundles, &ds)?;
    let coverage = eval::band_coverage(&bundles, &ds)?;
    log.push(format!(
        "scored {} of {} initializations after hour {split}",
        bundles.len(),
        anchors.len()
    ));
    log.push(format!(
        "pooled normalized rmse {pooled:.6}, band coverage {:.4}",
        coverage.fraction()
    ));
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.csv"), eval::report_csv(&report))?;
    write_json(&out.join("coverage.json"), &coverage)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "city": r.city,
            "split_hour": split,
            "n_initializations": anchors.len(),
            "n_scored": bundles.len(),
            "pooled_rmse": pooled,
            "lead_rmse": curve,
        }),
    )?;
    Ok(RunConfig::Evaluate(r))
}

pub fn ablate(mut r: AblateRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let ds = load_city(&r.data, &r.city)?;
    let model = resolve_model(&r.model, &r.train.quantiles, r.train.seed, &ds)?;
    let arms: Vec<AblationArm> = r.arms.iter().map(|a| AblationArm::parse(a)).collect::<Result<_>>()?;
    let summaries = eval::run_suite(&arms, &ds, &model, &r.train, &r.ablation, &r.seeds)?;
    let mut table = Vec::new();
    for s in &summaries {
        log.push(format!(
            "{}: mean pooled rmse {:.6}, std {:.6} over {} seeds",
            s.exp_id,
            s.mean_rmse,
            s.std_rmse,
            s.runs.len()
        ));
        write_json(&out.join(format!("report_{}.json", s.exp_id)), s)?;
        table.push(json!({
            "exp_id": s.exp_id,
            "mean_rmse": s.mean_rmse,
            "std_rmse": s.std_rmse,
            "n_runs": s.runs.len(),
        }));
    }
    write_json(&out.join("ablation.json"), &json!({ "seeds": r.seeds, "arms": table }))?;
    r.model = Some(model);
    Ok(RunConfig::Ablate(r))
}

pub fn gradcheck(r: GradcheckRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let report = verify_gradients(&r.model, r.seed)?;
    log.push(format!(
        "max relative error {:.3e} over {} parameter tensors",
        report.max_rel_err,
        report.per_tensor.len()
    ));
    write_json(&out.join("gradcheck.json"), &report)?;
    Ok(RunConfig::Gradcheck(r))
}

pub fn plot(r: PlotRun, out: &Path, log: &mut Vec<String>) -> Result<RunConfig> {
    let text = fs::read_to_string(&r.report)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", r.report.display())))?;
    let report = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", r.report.display())))?;
    for art in eval::plot_artifacts(&report)? {
        fs::write(out.join(format!("plot_{}.csv", art.metric)), &art.csv)?;
        fs::write(out.join(format!("plot_{}.svg", art.metric)), &art.svg)?;
        log.push(format!("wrote plot_{0}.csv and plot_{0}.svg", art.metric));
    }
    Ok(RunConfig::Plot(r))
}

