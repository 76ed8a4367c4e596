//! One city's complete dataset: stations, hourly observation series, hourly
//! meteorology frames, and monthly emission frames, plus directory
//! persistence.

use std::fs;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, Utc};

use crate::data::grid::{load_grid, save_grid};
use crate::data::stats::{compute_channel_stats, compute_norm_stats};
use crate::data::station_csv::{load_station_csv, save_station_csv};
use crate::data::types::{ChannelStats, GriddedField, NormStats, Station, StationSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CityDataset {
    pub city: String,
    pub series: Vec<StationSeries>,
    /// One frame per hour, aligned with the series time axis.
    pub met: Vec<GriddedField>,
    /// One frame per calendar month covered by the time axis.
    pub ems: Vec<GriddedField>,
    pub start: DateTime<Utc>,
    pub hours: usize,
}

impl CityDataset {
    pub fn stations(&self) -> Vec<Station> {
        self.series.iter().map(|s| s.station.clone()).collect()
    }

    pub fn n_stations(&self) -> usize {
        self.series.len()
    }

    pub fn time_at(&self, hour: usize) -> DateTime<Utc> {
        self.start + Duration::hours(hour as i64)
    }

    /// Index of the meteorology frame at `hour`, if covered.
    pub fn met_index(&self, hour: usize) -> Result<usize> {
        if hour < self.met.len() {
            Ok(hour)
        } else {
            Err(Error::MissingArtifact(format!(
                "no meteorology frame for hour {hour} (have {})",
                self.met.len()
            )))
        }
    }

    /// Index of the emission frame for the month containing `hour`.
    pub fn ems_index(&self, hour: usize) -> Result<usize> {
        let t = self.time_at(hour);
        let key = (t.year(), t.month());
        self.ems
            .iter()
            .position(|f| (f.time.year(), f.time.month()) == key)
            .ok_or_else(|| {
                Error::MissingArtifact(format!("no emission frame for month {}-{:02}", key.0, key.1))
            })
    }

    /// Per-pollutant standardization statistics over the full history.
    pub fn norm_stats(&self) -> Result<NormStats> {
        compute_norm_stats(&self.series)
    }

    pub fn met_channel_stats(&self) -> Result<ChannelStats> {
        compute_channel_stats(&self.met)
    }

    pub fn ems_channel_stats(&self) -> Result<ChannelStats> {
        compute_channel_stats(&self.ems)
    }

    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::InvalidInput(format!("city {:?} has no stations", self.city)));
        }
        for s in &self.series {
            s.validate()?;
            if s.start_time != self.start || s.hours() != self.hours {
                return Err(Error::InvalidInput(format!(
                    "station {:?} time axis differs from the city dataset",
                    s.station.id
                )));
            }
        }
        for (i, s) in self.series.iter().enumerate() {
            if self.series[..i].iter().any(|o| o.station.id == s.station.id) {
                return Err(Error::InvalidInput(format!("duplicate station id {:?}", s.station.id)));
            }
        }
        for (h, f) in self.met.iter().enumerate() {
            f.validate()?;
            if f.time != self.time_at(h) {
                return Err(Error::InvalidInput(format!(
                    "met frame {h} timestamped {} but the axis expects {}",
                    f.time,
                    self.time_at(h)
                )));
            }
        }
        for f in &self.ems {
            f.validate()?;
        }
        Ok(())
    }

    /// Write `stations.csv`, `met/`, and `ems/` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_station_csv(&dir.join("stations.csv"), &self.series)?;
        let met_dir = dir.join("met");
        for (h, f) in self.met.iter().enumerate() {
            save_grid(&met_dir, &format!("h{h:06}"), f)?;
        }
        let ems_dir = dir.join("ems");
        for (m, f) in self.ems.iter().enumerate() {
            save_grid(&ems_dir, &format!("m{m:02}"), f)?;
        }
        Ok(())
    }

    /// Read back a directory written by [`CityDataset::save`].
    pub fn load(dir: &Path, city: &str) -> Result<Self> {
        let series = load_station_csv(&dir.join("stations.csv"))?;
        let start = series
            .first()
            .map(|s| s.start_time)
            .ok_or_else(|| Error::MissingArtifact("dataset has no stations".into()))?;
        let hours = series[0].hours();
        let met = load_sorted_grids(&dir.join("met"))?;
        let ems = load_sorted_grids(&dir.join("ems"))?;
        let ds = Self { city: city.to_string(), series, met, ems, start, hours };
        ds.validate()?;
        Ok(ds)
    }
}

fn load_sorted_grids(dir: &Path) -> Result<Vec<GriddedField>> {
    let mut stems: Vec<String> = Vec::new();
    let entries =
        fs::read_dir(dir).map_err(|e| Error::MissingArtifact(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        out.push(load_grid(&dir.join(format!("{stem}.json")))?);
    }
    Ok(out)
}
