//! Scoring forecast bundles against observed station series: per-lead-hour
//! metrics, pooled window aggregates, quantile band coverage, and the flat
//! CSV rendering.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::data::dataset::CityDataset;
use crate::data::types::{POLLUTANTS, N_POLLUTANTS};
use crate::error::{Error, Result};
use crate::eval::metrics::{compute_metrics, Metrics};
use crate::model::ForecastBundle;

/// Day-scale aggregation windows, as inclusive lead-hour ranges.
pub const REPORT_WINDOWS: [(u32, u32); 3] = [(1, 24), (25, 48), (49, 72)];

pub const METRIC_NAMES: [&str; 5] = ["R", "RMSE", "rRMSE", "MRE", "MAE"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeadMetrics {
    pub lead_hour: u32,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowMetrics {
    /// Label like "1-24h"; pairs are pooled over the whole range, not
    /// averaged over per-hour metrics.
    pub label: String,
    pub from_hour: u32,
    pub to_hour: u32,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PollutantReport {
    pub pollutant: String,
    pub by_lead: Vec<LeadMetrics>,
    pub by_window: Vec<WindowMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub city: String,
    pub n_bundles: usize,
    pub n_pairs: usize,
    pub pollutants: Vec<PollutantReport>,
}

impl MetricsReport {
    pub fn pollutant(&self, name: &str) -> Option<&PollutantReport> {
        self.pollutants.iter().find(|p| p.pollutant == name)
    }

    /// Lead hours scored for the first pollutant (identical across them).
    pub fn lead_hours(&self) -> Vec<u32> {
        self.pollutants
            .first()
            .map(|p| p.by_lead.iter().map(|l| l.lead_hour).collect())
            .unwrap_or_default()
    }
}

/// (prediction, observation) pairs grouped by pollutant and lead hour.
pub type PairMap = BTreeMap<(usize, u32), Vec<(f64, f64)>>;

fn bundle_init_hour(bundle: &ForecastBundle, ds: &CityDataset) -> Result<usize> {
    let offset = bundle.init_time - ds.start;
    let hours = offset.num_hours();
    if offset != Duration::hours(hours) || hours < 0 || hours as usize >= ds.hours {
        return Err(Error::InvalidInput(format!(
            "bundle initialized at {} does not fall on an hour of the dataset ({} + {}h)",
            bundle.init_time.to_rfc3339(),
            ds.start.to_rfc3339(),
            ds.hours
        )));
    }
    Ok(hours as usize)
}

fn median_index(bundle: &ForecastBundle) -> Result<usize> {
    bundle
        .quantiles
        .iter()
        .position(|q| *q == 0.5)
        .ok_or_else(|| Error::InvalidInput("bundle has no 0.5 quantile to score".into()))
}

/// Collect scored pairs for the median slice of every bundle. Bundles whose
/// lead hours run past the dataset contribute only the overlapping part;
/// invalid observations are skipped.
pub fn collect_pairs(bundles: &[ForecastBundle], ds: &CityDataset) -> Result<PairMap> {
    if bundles.is_empty() {
        return Err(Error::InvalidInput("no forecast bundles to evaluate".into()));
    }
    let mut station_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in ds.series.iter().enumerate() {
        station_of.insert(&s.station.id, i);
    }
    let mut pairs: PairMap = BTreeMap::new();
    for bundle in bundles {
        bundle.validate()?;
        let init = bundle_init_hour(bundle, ds)?;
        let mi = median_index(bundle)?;
        let sidx: Vec<usize> = bundle
            .station_ids
            .iter()
            .map(|id| {
                station_of.get(id.as_str()).copied().ok_or_else(|| {
                    Error::InvalidInput(format!("bundle station {id:?} is not in dataset {:?}", ds.city))
                })
            })
            .collect::<Result<_>>()?;
        for (fi, &lead) in bundle.lead_hours.iter().enumerate() {
            let hour = init + lead as usize;
            if hour >= ds.hours {
                continue;
            }
            for (bs, &s) in sidx.iter().enumerate() {
                for p in 0..N_POLLUTANTS {
                    if let Some(obs) = ds.series[s].get(hour, p) {
                        pairs.entry((p, lead)).or_default().push((bundle.value(fi, bs, p, mi), obs));
                    }
                }
            }
        }
    }
    if pairs.values().all(|v| v.is_empty()) {
        return Err(Error::InsufficientData(
            "forecast bundles and observations do not overlap".into(),
        ));
    }
    Ok(pairs)
}

/// Score the median forecasts of `bundles` against the dataset's
/// observations: metrics per pollutant per lead hour, plus pooled aggregates
/// over the 1-24h / 25-48h / 49-72h windows.
pub fn window_report(bundles: &[ForecastBundle], ds: &CityDataset) -> Result<MetricsReport> {
    let pairs = collect_pairs(bundles, ds)?;
    let mut total = 0usize;
    let mut pollutants = Vec::with_capacity(N_POLLUTANTS);
    for (p, pol) in POLLUTANTS.iter().enumerate() {
        let mut by_lead = Vec::new();
        for ((_, lead), v) in pairs.range((p, 0)..(p, u32::MAX)) {
            total += v.len();
            if v.len() < 2 {
                continue;
            }
            let (pred, obs): (Vec<f64>, Vec<f64>) = v.iter().cloned().unzip();
            by_lead.push(LeadMetrics { lead_hour: *lead, metrics: compute_metrics(&pred, &obs)? });
        }
        let mut by_window = Vec::new();
        for (from, to) in REPORT_WINDOWS {
            let mut pred = Vec::new();
            let mut obs = Vec::new();
            for ((_, lead), v) in pairs.range((p, from)..=(p, to)) {
                debug_assert!((from..=to).contains(lead));
                for &(pv, ov) in v {
                    pred.push(pv);
                    obs.push(ov);
                }
            }
            if pred.len() < 2 {
                continue;
            }
            by_window.push(WindowMetrics {
                label: format!("{from}-{to}h"),
                from_hour: from,
                to_hour: to,
                metrics: compute_metrics(&pred, &obs)?,
            });
        }
        pollutants.push(PollutantReport { pollutant: pol.name().to_string(), by_lead, by_window });
    }
    Ok(MetricsReport { city: ds.city.clone(), n_bundles: bundles.len(), n_pairs: total, pollutants })
}

/// Fraction of scored observations falling inside the outermost quantile
/// band of the bundles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BandCoverage {
    pub n_pairs: usize,
    pub covered: usize,
}

impl BandCoverage {
    pub fn fraction(&self) -> f64 {
        self.covered as f64 / self.n_pairs as f64
    }
}

pub fn band_coverage(bundles: &[ForecastBundle], ds: &CityDataset) -> Result<BandCoverage> {
    if bundles.is_empty() {
        return Err(Error::InvalidInput("no forecast bundles to evaluate".into()));
    }
    let mut station_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in ds.series.iter().enumerate() {
        station_of.insert(&s.station.id, i);
    }
    let mut n = 0usize;
    let mut covered = 0usize;
    for bundle in bundles {
        bundle.validate()?;
        if bundle.quantiles.len() < 2 {
            return Err(Error::InvalidInput(
                "band coverage needs at least two quantile levels".into(),
            ));
        }
        let init = bundle_init_hour(bundle, ds)?;
        let hi = bundle.quantiles.len() - 1;
        let sidx: Vec<usize> = bundle
            .station_ids
            .iter()
            .map(|id| {
                station_of.get(id.as_str()).copied().ok_or_else(|| {
                    Error::InvalidInput(format!("bundle station {id:?} is not in dataset {:?}", ds.city))
                })
            })
            .collect::<Result<_>>()?;
        for (fi, &lead) in bundle.lead_hours.iter().enumerate() {
            let hour = init + lead as usize;
            if hour >= ds.hours {
                continue;
            }
            for (bs, &s) in sidx.iter().enumerate() {
                for p in 0..N_POLLUTANTS {
                    if let Some(obs) = ds.series[s].get(hour, p) {
                        n += 1;
                        if obs >= bundle.value(fi, bs, p, 0) && obs <= bundle.value(fi, bs, p, hi) {
                            covered += 1;
                        }
                    }
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData(
            "forecast bundles and observations do not overlap".into(),
        ));
    }
    Ok(BandCoverage { n_pairs: n, covered })
}

fn push_metric_rows(out: &mut String, pollutant: &str, lead: u32, m: &Metrics) {
    let values = [m.r, Some(m.rmse), m.rrmse, m.mre, Some(m.mae)];
    for (name, v) in METRIC_NAMES.iter().zip(values) {
        let cell = v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("{pollutant},{lead},{name},{cell},{}\n", m.n_pairs));
    }
}

/// Flat CSV of every per-lead metric: pollutant, lead_hour, metric, value,
/// n_pairs. Missing metrics render as empty cells.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("pollutant,lead_hour,metric,value,n_pairs\n");
    for pr in &report.pollutants {
        for lm in &pr.by_lead {
            push_metric_rows(&mut out, &pr.pollutant, lm.lead_hour, &lm.metrics);
        }
    }
    out
}
