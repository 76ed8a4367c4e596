//! Resolved run configurations: the one JSON document each command writes
//! into its run directory. The document names the command and every
//! parameter it ran with, so re-running from it reproduces the outputs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::dataset::CityDataset;
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::ablation::{AblationArm, AblationConfig};
use crate::model::config::ModelConfig;
use crate::train::TrainConfig;

fn default_eval_fraction() -> f64 {
    0.25
}
fn default_stride() -> usize {
    1
}
fn default_steps() -> usize {
    12
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_arms() -> Vec<String> {
    ["ALL", "DEMET", "DEEMS", "STN_ONLY"].map(str::to_string).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Synth(SynthRun),
    Train(TrainRun),
    TrainInterp(TrainInterpRun),
    Forecast(ForecastRun),
    Evaluate(EvaluateRun),
    Ablate(AblateRun),
    Gradcheck(GradcheckRun),
    Plot(PlotRun),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRun {
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    /// Dataset root as written by `synth`; the city lives at `data/<city>`.
    pub data: PathBuf,
    pub city: String,
    /// Absent: derived from the dataset when the run starts, and the derived
    /// value is what lands in the run directory.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Tail fraction of the timeline withheld from training windows.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_stride")]
    pub train_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainInterpRun {
    pub data: PathBuf,
    pub city: String,
    /// Checkpoint holding the 6-hour weights; its context (and normalization)
    /// is reused, and its weights are copied into the output checkpoint.
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_stride")]
    pub train_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRun {
    pub data: PathBuf,
    pub city: String,
    pub checkpoint: PathBuf,
    /// Initialization hour on the dataset axis; observations at this hour
    /// and six hours earlier seed the forecast.
    pub anchor_hour: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRun {
    pub data: PathBuf,
    pub city: String,
    pub checkpoint: PathBuf,
    /// Must match the fraction the checkpoint was trained with for the tail
    /// to be genuinely unseen.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Hours between forecast initializations in the tail.
    #[serde(default = "default_init_stride")]
    pub init_stride: usize,
    #[serde(default = "default_max_inits")]
    pub max_inits: usize,
}

fn default_init_stride() -> usize {
    6
}
fn default_max_inits() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateRun {
    pub data: PathBuf,
    pub city: String,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default = "default_arms")]
    pub arms: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckRun {
    #[serde(default = "ModelConfig::micro")]
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotRun {
    /// Path to a metrics report JSON written by `evaluate`.
    pub report: PathBuf,
}

fn check_fraction(name: &str, v: f64, problems: &mut Vec<String>) {
    if !v.is_finite() || v <= 0.0 || v >= 1.0 {
        problems.push(format!("{name} {v} must lie strictly between 0 and 1"));
    }
}

fn check_positive(name: &str, v: usize, problems: &mut Vec<String>) {
    if v == 0 {
        problems.push(format!("{name} must be at least 1"));
    }
}

fn check_city(city: &str, problems: &mut Vec<String>) {
    if city.is_empty() {
        problems.push("city must not be empty".into());
    }
}

fn finish(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(problems.join("; ")))
    }
}

impl RunConfig {
    pub fn command(&self) -> &'static str {
        match self {
            RunConfig::Synth(_) => "synth",
            RunConfig::Train(_) => "train",
            RunConfig::TrainInterp(_) => "train-interp",
            RunConfig::Forecast(_) => "forecast",
            RunConfig::Evaluate(_) => "evaluate",
            RunConfig::Ablate(_) => "ablate",
            RunConfig::Gradcheck(_) => "gradcheck",
            RunConfig::Plot(_) => "plot",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self {
            RunConfig::Synth(r) => return r.synth.validate(),
            RunConfig::Train(r) => {
                check_city(&r.city, &mut problems);
                check_fraction("eval_fraction", r.eval_fraction, &mut problems);
                check_positive("train_stride", r.train_stride, &mut problems);
                r.train.validate()?;
                if let Some(m) = &r.model {
                    m.validate()?;
                    if m.quantiles != r.train.quantiles {
                        problems.push(format!(
                            "model quantiles {:?} differ from training quantiles {:?}",
                            m.quantiles, r.train.quantiles
                        ));
                    }
                }
            }
            RunConfig::TrainInterp(r) => {
                check_city(&r.city, &mut problems);
                check_fraction("eval_fraction", r.eval_fraction, &mut problems);
                check_positive("train_stride", r.train_stride, &mut problems);
                r.train.validate()?;
            }
            RunConfig::Forecast(r) => {
                check_city(&r.city, &mut problems);
                check_positive("steps", r.steps, &mut problems);
            }
            RunConfig::Evaluate(r) => {
                check_city(&r.city, &mut problems);
                check_fraction("eval_fraction", r.eval_fraction, &mut problems);
                check_positive("steps", r.steps, &mut problems);
                check_positive("init_stride", r.init_stride, &mut problems);
                check_positive("max_inits", r.max_inits, &mut problems);
            }
            RunConfig::Ablate(r) => {
                check_city(&r.city, &mut problems);
                check_fraction("eval_fraction", r.ablation.eval_fraction, &mut problems);
                check_positive("train_stride", r.ablation.train_stride, &mut problems);
                check_positive("init_stride", r.ablation.init_stride, &mut problems);
                check_positive("max_inits", r.ablation.max_inits, &mut problems);
                check_positive("steps", r.ablation.steps, &mut problems);
                r.train.validate()?;
                if let Some(m) = &r.model {
                    m.validate()?;
                }
                if r.arms.is_empty() {
                    problems.push("arms must not be empty".into());
                }
                for (i, a) in r.arms.iter().enumerate() {
                    match AblationArm::parse(a) {
                        Ok(arm) => {
                            let earlier = r.arms[..i]
                                .iter()
                                .any(|b| AblationArm::parse(b).ok() == Some(arm));
                            if earlier {
                                problems.push(format!("duplicate arm {a:?}"));
                            }
                        }
                        Err(e) => problems.push(e.to_string()),
                    }
                }
                if r.seeds.is_empty() {
                    problems.push("seeds must not be empty".into());
                }
                for (i, s) in r.seeds.iter().enumerate() {
                    if r.seeds[..i].contains(s) {
                        problems.push(format!("duplicate seed {s}"));
                    }
                }
            }
            RunConfig::Gradcheck(r) => return r.model.validate(),
            RunConfig::Plot(_) => {}
        }
        finish(problems)
    }

    /// Pretty JSON with a trailing newline, as written to run directories.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Parse and validate a run configuration document.
pub fn parse_run_config(json: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(json)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Copy of `base` with the dataset-shaped fields (station count, channel
/// counts, grid dimensions) taken from the data it will train on.
pub fn fit_model_to_dataset(base: &ModelConfig, ds: &CityDataset) -> Result<ModelConfig> {
    let met = ds
        .met
        .first()
        .ok_or_else(|| Error::MissingArtifact(format!("dataset {:?} has no meteorology", ds.city)))?;
    let ems = ds
        .ems
        .first()
        .ok_or_else(|| Error::MissingArtifact(format!("dataset {:?} has no emissions", ds.city)))?;
    let cfg = ModelConfig {
        n_stations: ds.n_stations(),
        met_channels: met.n_channels(),
        ems_channels: ems.n_channels(),
        grid_n_lat: met.n_lat,
        grid_n_lon: met.n_lon,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}
