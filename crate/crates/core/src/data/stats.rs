//! Standardization statistics over station histories and gridded inputs.

use crate::data::types::{ChannelStats, GriddedField, NormStats, StationSeries, N_POLLUTANTS, POLLUTANTS};
use crate::error::{Error, Result};

/// Standardize one concentration with a city's per-pollutant statistics.
pub fn normalize(x: f64, stats: &NormStats, pollutant: usize) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("cannot normalize non-finite value {x}")));
    }
    Ok((x - stats.mean[pollutant]) / stats.std[pollutant])
}

/// Invert [`normalize`].
pub fn denormalize(z: f64, stats: &NormStats, pollutant: usize) -> f64 {
    z * stats.std[pollutant] + stats.mean[pollutant]
}

/// Per-pollutant mean and population standard deviation over the valid
/// entries of every station in one city, pooled.
pub fn compute_norm_stats(series: &[StationSeries]) -> Result<NormStats> {
    let mut count = [0usize; N_POLLUTANTS];
    let mut sum = [0.0f64; N_POLLUTANTS];
    for s in series {
        for h in 0..s.hours() {
            for p in 0..N_POLLUTANTS {
                if let Some(v) = s.get(h, p) {
                    count[p] += 1;
                    sum[p] += v;
                }
            }
        }
    }
    let mut mean = [0.0; N_POLLUTANTS];
    for p in 0..N_POLLUTANTS {
        if count[p] < 2 {
            return Err(Error::InsufficientData(format!(
                "pollutant {} has {} valid samples; need at least 2",
                POLLUTANTS[p].name(),
                count[p]
            )));
        }
        mean[p] = sum[p] / count[p] as f64;
    }
    let mut sq = [0.0f64; N_POLLUTANTS];
    for s in series {
        for h in 0..s.hours() {
            for p in 0..N_POLLUTANTS {
                if let Some(v) = s.get(h, p) {
                    let d = v - mean[p];
                    sq[p] += d * d;
                }
            }
        }
    }
    let mut std = [0.0; N_POLLUTANTS];
    for p in 0..N_POLLUTANTS {
        std[p] = (sq[p] / count[p] as f64).sqrt();
        if std[p] <= 0.0 {
            return Err(Error::ZeroVariance { pollutant: POLLUTANTS[p].name() });
        }
    }
    Ok(NormStats { mean, std })
}

/// Per-channel mean and population standard deviation pooled over every cell
/// of every frame. Channels with zero variance get std 1 so they standardize
/// to a constant instead of dividing by zero.
pub fn compute_channel_stats(frames: &[GriddedField]) -> Result<ChannelStats> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InsufficientData("no grid frames for channel statistics".into()))?;
    let c = first.n_channels();
    let cell_count = first.n_lat * first.n_lon;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for f in frames {
        if f.n_channels() != c {
            return Err(Error::ShapeMismatch {
                op: "compute_channel_stats",
                detail: format!("frame has {} channels, expected {c}", f.n_channels()),
            });
        }
        for ch in 0..c {
            for i in 0..f.n_lat {
                for j in 0..f.n_lon {
                    let v = f.at(ch, i, j);
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
    }
    let n = (frames.len() * cell_count) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / n - m * m).max(0.0);
            let sd = var.sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok(ChannelStats { mean, std })
}
