//! Training and inference window extraction.
//!
//! A six-hour window anchored at hour `t` pairs the observations at `t-6`
//! and `t` with the target at `t+6`; an interpolation window anchored at `t`
//! pairs the bracketing observations at `t` and `t+6` with the five hourly
//! targets strictly between them. Windows touching any invalid entry are
//! dropped. All values are standardized with the city statistics.

use crate::data::dataset::CityDataset;
use crate::data::stats::normalize;
use crate::data::types::{encode_time, NormStats, TimeCode, N_POLLUTANTS};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Predict `t+6` from (`t-6`, `t`). Met frame: the target hour `t+6`.
    SixHour,
    /// Infill `t+1..t+5` from (`t`, `t+6`). Met frame: the central hour `t+3`.
    Interp,
}

#[derive(Debug, Clone)]
pub struct SampleWindow {
    pub kind: WindowKind,
    /// Hour index of the anchor `t` on the dataset axis.
    pub anchor_hour: usize,
    /// `[N_s × 6]` standardized observations for the earlier input slot.
    pub x_prev: Tensor,
    /// `[N_s × 6]` standardized observations for the later input slot.
    pub x_curr: Tensor,
    /// Index into the dataset's hourly meteorology frames.
    pub met_idx: usize,
    /// Index into the dataset's monthly emission frames.
    pub ems_idx: usize,
    pub timecode: TimeCode,
    /// `[N_s × 6]` for six-hour windows, `[5 × N_s × 6]` for interpolation.
    pub target: Tensor,
}

/// Standardized `[N_s × 6]` frame at one hour, or None when any entry is
/// invalid.
pub fn frame_at(ds: &CityDataset, stats: &NormStats, hour: usize) -> Result<Option<Tensor>> {
    let n_s = ds.n_stations();
    let mut t = Tensor::zeros(&[n_s, N_POLLUTANTS]);
    for (s_idx, s) in ds.series.iter().enumerate() {
        for p in 0..N_POLLUTANTS {
            match s.get(hour, p) {
                Some(v) => t.set2(s_idx, p, normalize(v, stats, p)?),
                None => return Ok(None),
            }
        }
    }
    Ok(Some(t))
}

/// Extract every complete window at the given anchor stride.
pub fn build_windows(
    ds: &CityDataset,
    stats: &NormStats,
    kind: WindowKind,
    stride: usize,
) -> Result<Vec<SampleWindow>> {
    if stride == 0 {
        return Err(Error::InvalidInput("window stride must be at least 1".into()));
    }
    if ds.hours < 13 {
        return Err(Error::InsufficientData(format!(
            "dataset spans {} hours; windows need at least 13",
            ds.hours
        )));
    }
    let mut out = Vec::new();
    let (first_anchor, last_anchor) = match kind {
        WindowKind::SixHour => (6usize, ds.hours - 7),
        WindowKind::Interp => (0usize, ds.hours - 7),
    };
    let mut t = first_anchor;
    while t <= last_anchor {
        if let Some(w) = window_at(ds, stats, kind, t)? {
            out.push(w);
        }
        t += stride;
    }
    if out.is_empty() {
        log::warn!(
            "no complete {:?} windows found over {} hours (stride {stride})",
            kind,
            ds.hours
        );
    }
    Ok(out)
}

/// Build the window anchored at hour `t`, or None if any required entry is
/// missing.
pub fn window_at(
    ds: &CityDataset,
    stats: &NormStats,
    kind: WindowKind,
    t: usize,
) -> Result<Option<SampleWindow>> {
    match kind {
        WindowKind::SixHour => {
            if t < 6 || t + 6 >= ds.hours {
                return Ok(None);
            }
            let (Some(x_prev), Some(x_curr), Some(target)) = (
                frame_at(ds, stats, t - 6)?,
                frame_at(ds, stats, t)?,
                frame_at(ds, stats, t + 6)?,
            ) else {
                return Ok(None);
            };
            Ok(Some(SampleWindow {
                kind,
                anchor_hour: t,
                x_prev,
                x_curr,
                met_idx: ds.met_index(t + 6)?,
                ems_idx: ds.ems_index(t)?,
                timecode: encode_time(ds.time_at(t)),
                target,
            }))
        }
        WindowKind::Interp => {
            if t + 6 >= ds.hours {
                return Ok(None);
            }
            let (Some(x_prev), Some(x_curr)) = (frame_at(ds, stats, t)?, frame_at(ds, stats, t + 6)?)
            else {
                return Ok(None);
            };
            let n_s = ds.n_stations();
            let mut target = Tensor::zeros(&[5, n_s, N_POLLUTANTS]);
            for k in 0..5 {
                match frame_at(ds, stats, t + 1 + k)? {
                    Some(f) => {
                        for s_idx in 0..n_s {
                            for p in 0..N_POLLUTANTS {
                                target.set3(k, s_idx, p, f.at2(s_idx, p));
                            }
                        }
                    }
                    None => return Ok(None),
                }
            }
            Ok(Some(SampleWindow {
                kind,
                anchor_hour: t,
                x_prev,
                x_curr,
                met_idx: ds.met_index(t + 3)?,
                ems_idx: ds.ems_index(t)?,
                timecode: encode_time(ds.time_at(t)),
                target,
            }))
        }
    }
}
