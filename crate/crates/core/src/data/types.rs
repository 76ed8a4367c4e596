//! Domain types: pollutants, stations, observation series, gridded fields,
//! and time codes.

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six monitored pollutants, in the fixed axis order used by every
/// series, window, and forecast tensor. Concentrations are µg/m³ except CO,
/// which is mg/m³.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pollutant {
    So2,
    No2,
    Co,
    O3,
    Pm25,
    Pm10,
}

pub const POLLUTANTS: [Pollutant; 6] = [
    Pollutant::So2,
    Pollutant::No2,
    Pollutant::Co,
    Pollutant::O3,
    Pollutant::Pm25,
    Pollutant::Pm10,
];

/// Number of pollutant channels (the `D` of feature-width arithmetic).
pub const N_POLLUTANTS: usize = 6;

impl Pollutant {
    pub fn name(&self) -> &'static str {
        match self {
            Pollutant::So2 => "so2",
            Pollutant::No2 => "no2",
            Pollutant::Co => "co",
            Pollutant::O3 => "o3",
            Pollutant::Pm25 => "pm25",
            Pollutant::Pm10 => "pm10",
        }
    }

    pub fn index(&self) -> usize {
        POLLUTANTS.iter().position(|p| p == self).expect("pollutant in table")
    }

    pub fn from_name(name: &str) -> Result<Self> {
        POLLUTANTS
            .iter()
            .copied()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Parse(format!("unknown pollutant {name:?}")))
    }
}

/// A monitoring site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

impl Station {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidInput("station id must be non-empty".into()));
        }
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::InvalidInput(format!(
                "station {:?} latitude {} outside [-90, 90]",
                self.id, self.lat
            )));
        }
        if !self.lon.is_finite() || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidInput(format!(
                "station {:?} longitude {} outside [-180, 180]",
                self.id, self.lon
            )));
        }
        Ok(())
    }
}

/// Hourly concentrations of the six pollutants at one station, with a
/// validity mask. `values` and `valid` are `[T × 6]` row-major.
#[derive(Debug, Clone)]
pub struct StationSeries {
    pub station: Station,
    pub start_time: DateTime<Utc>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl StationSeries {
    pub fn new(station: Station, start_time: DateTime<Utc>, hours: usize) -> Self {
        Self {
            station,
            start_time,
            values: vec![0.0; hours * N_POLLUTANTS],
            valid: vec![false; hours * N_POLLUTANTS],
        }
    }

    pub fn hours(&self) -> usize {
        self.values.len() / N_POLLUTANTS
    }

    pub fn get(&self, hour: usize, pollutant: usize) -> Option<f64> {
        let i = hour * N_POLLUTANTS + pollutant;
        if self.valid[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    pub fn set(&mut self, hour: usize, pollutant: usize, value: f64) {
        let i = hour * N_POLLUTANTS + pollutant;
        self.values[i] = value;
        self.valid[i] = true;
    }

    pub fn time_at(&self, hour: usize) -> DateTime<Utc> {
        self.start_time + Duration::hours(hour as i64)
    }

    pub fn validate(&self) -> Result<()> {
        self.station.validate()?;
        if self.values.len() != self.valid.len() {
            return Err(Error::InvalidInput(format!(
                "station {:?}: values ({}) and mask ({}) lengths differ",
                self.station.id,
                self.values.len(),
                self.valid.len()
            )));
        }
        if self.values.len() % N_POLLUTANTS != 0 {
            return Err(Error::InvalidInput(format!(
                "station {:?}: buffer length {} not a multiple of {}",
                self.station.id,
                self.values.len(),
                N_POLLUTANTS
            )));
        }
        for (i, (&v, &ok)) in self.values.iter().zip(&self.valid).enumerate() {
            if ok && (!v.is_finite() || v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "station {:?}: invalid concentration {} at flat index {}",
                    self.station.id, v, i
                )));
            }
        }
        Ok(())
    }
}

/// Per-pollutant standardization statistics for one city.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_POLLUTANTS],
    pub std: [f64; N_POLLUTANTS],
}

/// Per-channel standardization statistics for gridded inputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Day-of-year and hour-of-day of a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeCode {
    pub doy: u32,
    pub hod: u32,
}

impl TimeCode {
    pub fn validate(&self) -> Result<()> {
        if !(1..=366).contains(&self.doy) || self.hod > 23 {
            return Err(Error::InvalidInput(format!(
                "time code out of range: doy {}, hod {}",
                self.doy, self.hod
            )));
        }
        Ok(())
    }
}

/// Extract the day-of-year (1..=366, leap-aware) and hour-of-day of a UTC
/// timestamp.
pub fn encode_time(t: DateTime<Utc>) -> TimeCode {
    TimeCode { doy: t.ordinal(), hod: t.hour() }
}

/// A regular lat/lon raster of named channels at one timestamp. Cell (i, j)
/// is centered at `(origin_lat + i·resolution, origin_lon + j·resolution)`;
/// `data` is `[C × n_lat × n_lon]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedField {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub resolution: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub channels: Vec<String>,
    pub time: DateTime<Utc>,
    pub data: Vec<f64>,
}

impl GriddedField {
    pub fn zeros(
        origin_lat: f64,
        origin_lon: f64,
        resolution: f64,
        n_lat: usize,
        n_lon: usize,
        channels: Vec<String>,
        time: DateTime<Utc>,
    ) -> Self {
        let n = channels.len() * n_lat * n_lon;
        Self { origin_lat, origin_lon, resolution, n_lat, n_lon, channels, time, data: vec![0.0; n] }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.n_lat + i) * self.n_lon + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.data[(c * self.n_lat + i) * self.n_lon + j] = v;
    }

    /// Latitude of the center of row `i`.
    pub fn lat_at(&self, i: usize) -> f64 {
        self.origin_lat + i as f64 * self.resolution
    }

    /// Longitude of the center of column `j`.
    pub fn lon_at(&self, j: usize) -> f64 {
        self.origin_lon + j as f64 * self.resolution
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::InvalidInput(format!("grid resolution {} must be > 0", self.resolution)));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(Error::InvalidInput("grid origin must be finite".into()));
        }
        if self.n_lat == 0 || self.n_lon == 0 || self.channels.is_empty() {
            return Err(Error::InvalidInput("grid must have at least one channel and one cell".into()));
        }
        let expected = self.n_channels() * self.n_lat * self.n_lon;
        if self.data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "grid data length {} does not match {} channels x {} x {}",
                self.data.len(),
                self.n_channels(),
                self.n_lat,
                self.n_lon
            )));
        }
        for (i, name) in self.channels.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidInput("empty grid channel name".into()));
            }
            if self.channels[..i].contains(name) {
                return Err(Error::InvalidInput(format!("duplicate grid channel {name:?}")));
            }
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grid data contains non-finite values".into()));
        }
        Ok(())
    }

    /// Bilinear interpolation of one channel at a geographic point. The
    /// point must lie within the rectangle spanned by the outermost cell
    /// centers.
    pub fn sample(&self, c: usize, lat: f64, lon: f64) -> Result<f64> {
        if c >= self.n_channels() {
            return Err(Error::OutOfBounds(format!(
                "channel {c} out of range ({} channels)",
                self.n_channels()
            )));
        }
        let fi = (lat - self.origin_lat) / self.resolution;
        let fj = (lon - self.origin_lon) / self.resolution;
        let eps = 1e-9;
        if fi < -eps || fj < -eps || fi > (self.n_lat - 1) as f64 + eps || fj > (self.n_lon - 1) as f64 + eps {
            return Err(Error::OutOfBounds(format!(
                "point ({lat}, {lon}) outside grid extent [{}, {}] x [{}, {}]",
                self.origin_lat,
                self.lat_at(self.n_lat - 1),
                self.origin_lon,
                self.lon_at(self.n_lon - 1)
            )));
        }
        let fi = fi.clamp(0.0, (self.n_lat - 1) as f64);
        let fj = fj.clamp(0.0, (self.n_lon - 1) as f64);
        let i0 = (fi.floor() as usize).min(self.n_lat - 1);
        let j0 = (fj.floor() as usize).min(self.n_lon - 1);
        let i1 = (i0 + 1).min(self.n_lat - 1);
        let j1 = (j0 + 1).min(self.n_lon - 1);
        let di = fi - i0 as f64;
        let dj = fj - j0 as f64;
        let v00 = self.at(c, i0, j0);
        let v01 = self.at(c, i0, j1);
        let v10 = self.at(c, i1, j0);
        let v11 = self.at(c, i1, j1);
        Ok(v00 * (1.0 - di) * (1.0 - dj) + v01 * (1.0 - di) * dj + v10 * di * (1.0 - dj) + v11 * di * dj)
    }

    /// Index of the cell whose center is nearest to a geographic point.
    pub fn nearest_cell(&self, lat: f64, lon: f64) -> (usize, usize) {
        let i = ((lat - self.origin_lat) / self.resolution).round();
        let j = ((lon - self.origin_lon) / self.resolution).round();
        (
            (i.max(0.0) as usize).min(self.n_lat - 1),
            (j.max(0.0) as usize).min(self.n_lon - 1),
        )
    }
}
