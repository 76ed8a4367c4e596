//! Modality ablation: retrain the forecaster with meteorology and/or
//! emission inputs zeroed, score every arm on the same held-out tail, and
//! summarize across seeds. Arms share shapes and parameter counts, so the
//! only differences are the mask and the training seed.

use serde::{Deserialize, Serialize};

use crate::data::dataset::CityDataset;
use crate::data::windows::WindowKind;
use crate::error::{Error, Result};
use crate::eval::holdout::{
    eval_anchors, pooled_normalized_rmse, rollout_bundles, split_hour, train_windows,
};
use crate::eval::report::{window_report, MetricsReport};
use crate::model::config::ModelConfig;
use crate::model::forecaster::ModelContext;
use crate::model::ModalityMask;
use crate::train::{train_6h, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationArm {
    /// Full model: meteorology and emissions both visible.
    All,
    /// Meteorology denied.
    Demet,
    /// Emissions denied.
    Deems,
    /// Station history only.
    StnOnly,
}

pub const ALL_ARMS: [AblationArm; 4] =
    [AblationArm::All, AblationArm::Demet, AblationArm::Deems, AblationArm::StnOnly];

impl AblationArm {
    pub fn label(self) -> &'static str {
        match self {
            AblationArm::All => "ALL",
            AblationArm::Demet => "DEMET",
            AblationArm::Deems => "DEEMS",
            AblationArm::StnOnly => "STN_ONLY",
        }
    }

    pub fn mask(self) -> ModalityMask {
        match self {
            AblationArm::All => ModalityMask::ALL,
            AblationArm::Demet => ModalityMask::NO_MET,
            AblationArm::Deems => ModalityMask::NO_EMS,
            AblationArm::StnOnly => ModalityMask::NONE,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ALL" => Ok(AblationArm::All),
            "DEMET" => Ok(AblationArm::Demet),
            "DEEMS" => Ok(AblationArm::Deems),
            "STN_ONLY" | "STN-ONLY" => Ok(AblationArm::StnOnly),
            other => Err(Error::InvalidInput(format!(
                "unknown ablation arm {other:?}; expected ALL, DEMET, DEEMS or STN_ONLY"
            ))),
        }
    }
}

/// Split and rollout geometry shared by every arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Fraction of the timeline withheld for scoring.
    pub eval_fraction: f64,
    /// Anchor stride for training windows.
    pub train_stride: usize,
    /// Hours between forecast initializations in the tail.
    pub init_stride: usize,
    pub max_inits: usize,
    /// Rollout length in 6-hour steps.
    pub steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { eval_fraction: 0.25, train_stride: 1, init_stride: 6, max_inits: 24, steps: 4 }
    }
}

/// One arm, trained at one seed and scored on the held-out tail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmRun {
    pub exp_id: String,
    pub seed: u64,
    pub best_val_loss: f64,
    /// Pooled standardized RMSE over every scored pair in the tail.
    pub pooled_rmse: f64,
    pub n_bundles: usize,
    pub report: MetricsReport,
}

pub fn run_arm(
    arm: AblationArm,
    ds: &CityDataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    acfg: &AblationConfig,
) -> Result<ArmRun> {
    let ctx = ModelContext::from_dataset(mcfg, ds)?.with_mask(arm.mask());
    let split = split_hour(ds, acfg.eval_fraction)?;
    let windows = train_windows(ds, &ctx, WindowKind::SixHour, acfg.train_stride, split)?;
    let (store, train_report) = train_6h(&ctx, ds, &windows, tcfg)?;
    let anchors = eval_anchors(ds, split, acfg.steps, acfg.init_stride, acfg.max_inits)?;
    let bundles = rollout_bundles(&ctx, &store, ds, &anchors, acfg.steps)?;
    let pooled_rmse = pooled_normalized_rmse(&bundles, ds)?;
    let report = window_report(&bundles, ds)?;
    log::info!(
        "arm {} seed {}: val {:.6}, pooled rmse {:.6} over {} bundles",
        arm.label(),
        tcfg.seed,
        train_report.best_val_loss,
        pooled_rmse,
        bundles.len()
    );
    Ok(ArmRun {
        exp_id: arm.label().to_string(),
        seed: tcfg.seed,
        best_val_loss: train_report.best_val_loss,
        pooled_rmse,
        n_bundles: bundles.len(),
        report,
    })
}

/// Pooled error of one arm across seeds: mean and sample standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub exp_id: String,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub runs: Vec<ArmRun>,
}

pub fn summarize(exp_id: &str, runs: Vec<ArmRun>) -> Result<ArmSummary> {
    if runs.is_empty() {
        return Err(Error::InsufficientData(format!("arm {exp_id} has no runs to summarize")));
    }
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.pooled_rmse).sum::<f64>() / n;
    let std = if runs.len() < 2 {
        0.0
    } else {
        (runs.iter().map(|r| (r.pooled_rmse - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(ArmSummary { exp_id: exp_id.to_string(), mean_rmse: mean, std_rmse: std, runs })
}

/// Run every arm at every seed. Arms keep their given order; each arm's
/// runs keep seed order.
pub fn run_suite(
    arms: &[AblationArm],
    ds: &CityDataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    acfg: &AblationConfig,
    seeds: &[u64],
) -> Result<Vec<ArmSummary>> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one arm and one seed".into()));
    }
    for (i, a) in arms.iter().enumerate() {
        if arms[..i].contains(a) {
            return Err(Error::InvalidInput(format!("duplicate ablation arm {}", a.label())));
        }
    }
    let mut out = Vec::with_capacity(arms.len());
    for &arm in arms {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut t = tcfg.clone();
            t.seed = seed;
            runs.push(run_arm(arm, ds, mcfg, &t, acfg)?);
        }
        out.push(summarize(arm.label(), runs)?);
    }
    Ok(out)
}

/// True when `worse` sits above `better` by more than `k` times the larger
/// of the two spreads.
pub fn gap_exceeds(better: &ArmSummary, worse: &ArmSummary, k: f64) -> bool {
    worse.mean_rmse - better.mean_rmse > k * better.std_rmse.max(worse.std_rmse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_generate;
    use crate::testutil::micro_synth_config;

    fn quick_train(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { lr: 3e-3, epochs, seed, ..TrainConfig::default() }
    }

    fn fake_run(exp_id: &str, pooled_rmse: f64) -> ArmRun {
        ArmRun {
            exp_id: exp_id.into(),
            seed: 0,
            best_val_loss: 1.0,
            pooled_rmse,
            n_bundles: 1,
            report: MetricsReport { city: "x".into(), n_bundles: 1, n_pairs: 0, pollutants: vec![] },
        }
    }

    #[test]
    fn arms_have_distinct_labels_and_masks() {
        let labels: Vec<&str> = ALL_ARMS.iter().map(|a| a.label()).collect();
        let masks: Vec<ModalityMask> = ALL_ARMS.iter().map(|a| a.mask()).collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(labels[i], labels[j]);
                assert_ne!(masks[i], masks[j]);
            }
            assert_eq!(AblationArm::parse(labels[i]).unwrap(), ALL_ARMS[i]);
        }
        assert!(AblationArm::parse("all ").is_ok());
        assert!(AblationArm::parse("stn-only").is_ok());
        assert!(AblationArm::parse("nope").is_err());
        assert!(!AblationArm::Demet.mask().met && AblationArm::Demet.mask().ems);
        assert!(AblationArm::Deems.mask().met && !AblationArm::Deems.mask().ems);
    }

    #[test]
    fn summary_statistics_match_hand_numbers() {
        let runs = vec![fake_run("A", 1.0), fake_run("A", 2.0), fake_run("A", 4.0)];
        let s = summarize("A", runs).unwrap();
        assert!((s.mean_rmse - 7.0 / 3.0).abs() < 1e-15);
        assert!((s.std_rmse - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let lone = summarize("B", vec![fake_run("B", 3.0)]).unwrap();
        assert_eq!(lone.std_rmse, 0.0);
        assert!(summarize("C", vec![]).is_err());

        let better = summarize("A", vec![fake_run("A", 1.0), fake_run("A", 1.2)]).unwrap();
        let worse = summarize("B", vec![fake_run("B", 2.0), fake_run("B", 2.2)]).unwrap();
        // gap 1.0, larger std ~0.141: clears 2 sigma but not 8
        assert!(gap_exceeds(&better, &worse, 2.0));
        assert!(!gap_exceeds(&better, &worse, 8.0));
        assert!(!gap_exceeds(&worse, &better, 2.0));
    }

    #[test]
    fn unusable_split_is_reported_not_panicked() {
        let ds = crate::testutil::micro_dataset();
        let acfg = AblationConfig { eval_fraction: 0.99, ..AblationConfig::default() };
        let r = run_arm(
            AblationArm::All,
            &ds,
            &ModelConfig::micro(),
            &quick_train(1, 0),
            &acfg,
        );
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn meteorology_helps_on_wind_driven_data() {
        let mut scfg = micro_synth_config();
        scfg.wind_coef = 1.2;
        scfg.ems_coef = 0.3;
        scfg.noise_amp = 0.05;
        let ds = synth_generate(&scfg, scfg.seed).unwrap().remove(0);
        let acfg = AblationConfig { train_stride: 2, ..AblationConfig::default() };
        let tcfg = quick_train(12, 3);
        let all = run_arm(AblationArm::All, &ds, &ModelConfig::micro(), &tcfg, &acfg).unwrap();
        let stn = run_arm(AblationArm::StnOnly, &ds, &ModelConfig::micro(), &tcfg, &acfg).unwrap();
        assert_eq!(all.exp_id, "ALL");
        assert_eq!(stn.exp_id, "STN_ONLY");
        assert!(
            all.pooled_rmse < stn.pooled_rmse,
            "ALL {} should beat STN_ONLY {}",
            all.pooled_rmse,
            stn.pooled_rmse
        );
    }

    #[test]
    fn without_emission_signal_demet_matches_station_only() {
        let mut scfg = micro_synth_config();
        scfg.ems_coef = 0.0;
        scfg.wind_coef = 0.4;
        let ds = synth_generate(&scfg, scfg.seed).unwrap().remove(0);
        let acfg = AblationConfig { train_stride: 4, ..AblationConfig::default() };
        let summaries = run_suite(
            &[AblationArm::Demet, AblationArm::StnOnly],
            &ds,
            &ModelConfig::micro(),
            &quick_train(4, 0),
            &acfg,
            &[1, 2, 3],
        )
        .unwrap();
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].exp_id, "DEMET");
        assert_eq!(summaries[1].exp_id, "STN_ONLY");
        assert_eq!(summaries[0].runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
        // neither arm sees usable emission signal, so neither should win by
        // more than twice the seed spread
        assert!(!gap_exceeds(&summaries[0], &summaries[1], 2.0));
        assert!(!gap_exceeds(&summaries[1], &summaries[0], 2.0));
    }

    #[test]
    fn duplicate_arms_are_rejected() {
        let ds = crate::testutil::micro_dataset();
        let r = run_suite(
            &[AblationArm::All, AblationArm::All],
            &ds,
            &ModelConfig::micro(),
            &quick_train(1, 0),
            &AblationConfig::default(),
            &[1],
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
