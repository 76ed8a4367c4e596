//! Station observation CSV: `time,station_id,lat,lon,so2,no2,co,o3,pm25,pm10`.
//!
//! One row per (hour, station); an empty concentration cell means missing.
//! Parsing accepts rows in any order and returns one series per station on a
//! common hourly axis spanning the full time range. Input is untrusted:
//! every malformation is a returned error, never a panic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};

use crate::data::types::{Station, StationSeries, N_POLLUTANTS, POLLUTANTS};
use crate::error::{Error, Result};

pub const HEADER: [&str; 10] =
    ["time", "station_id", "lat", "lon", "so2", "no2", "co", "o3", "pm25", "pm10"];

/// Hard ceilings so corrupt inputs cannot demand absurd allocations.
const MAX_SPAN_HOURS: i64 = 24 * 366 * 20;
const MAX_STATIONS: usize = 10_000;

struct StationRows {
    lat: f64,
    lon: f64,
    rows: BTreeMap<i64, [Option<f64>; N_POLLUTANTS]>,
}

/// Parse CSV bytes into per-station series, sorted by station id.
pub fn parse_station_csv(bytes: &[u8]) -> Result<Vec<StationSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);

    let headers = reader.headers().map_err(|e| Error::Parse(format!("station csv header: {e}")))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != HEADER {
        return Err(Error::Parse(format!(
            "station csv header must be {:?}, got {:?}",
            HEADER.join(","),
            got.join(",")
        )));
    }

    let mut stations: BTreeMap<String, StationRows> = BTreeMap::new();
    let mut min_t: Option<DateTime<Utc>> = None;
    let mut max_t: Option<DateTime<Utc>> = None;

    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("station csv row {}: {e}", line + 2)))?;
        let row_err = |msg: String| Error::Parse(format!("station csv row {}: {msg}", line + 2));

        let time = parse_hour(record.get(0).unwrap_or("")).map_err(|e| row_err(e.to_string()))?;
        let id = record.get(1).unwrap_or("").trim();
        if id.is_empty() {
            return Err(row_err("empty station_id".into()));
        }
        let lat = parse_coord(record.get(2).unwrap_or(""), "lat").map_err(|e| row_err(e.to_string()))?;
        let lon = parse_coord(record.get(3).unwrap_or(""), "lon").map_err(|e| row_err(e.to_string()))?;

        let mut conc = [None; N_POLLUTANTS];
        for (p, slot) in conc.iter_mut().enumerate() {
            let cell = record.get(4 + p).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| row_err(format!("bad {} value {cell:?}", POLLUTANTS[p].name())))?;
            if !v.is_finite() || v < 0.0 {
                return Err(row_err(format!(
                    "{} value {v} must be finite and non-negative",
                    POLLUTANTS[p].name()
                )));
            }
            *slot = Some(v);
        }

        min_t = Some(min_t.map_or(time, |m| m.min(time)));
        max_t = Some(max_t.map_or(time, |m| m.max(time)));
        if let (Some(a), Some(b)) = (min_t, max_t) {
            if (b - a).num_hours() > MAX_SPAN_HOURS {
                return Err(Error::Parse(format!(
                    "station csv spans more than {MAX_SPAN_HOURS} hours"
                )));
            }
        }

        if !stations.contains_key(id) {
            if stations.len() >= MAX_STATIONS {
                return Err(Error::Parse(format!("station csv has more than {MAX_STATIONS} stations")));
            }
            stations.insert(id.to_string(), StationRows { lat, lon, rows: BTreeMap::new() });
        }
        let entry = stations.get_mut(id).expect("present");
        if entry.lat != lat || entry.lon != lon {
            return Err(row_err(format!(
                "station {id:?} has conflicting coordinates ({}, {}) vs ({lat}, {lon})",
                entry.lat, entry.lon
            )));
        }
        let key = time.timestamp();
        if entry.rows.insert(key, conc).is_some() {
            return Err(row_err(format!("duplicate row for station {id:?} at {time}")));
        }
    }

    let (start, end) = match (min_t, max_t) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Parse("station csv contains no data rows".into())),
    };
    let hours = (end - start).num_hours() as usize + 1;

    let mut out = Vec::with_capacity(stations.len());
    for (id, rows) in stations {
        let station = Station { id, lat: rows.lat, lon: rows.lon };
        station.validate().map_err(|e| Error::Parse(e.to_string()))?;
        let mut series = StationSeries::new(station, start, hours);
        for (ts, conc) in rows.rows {
            let h = (ts - start.timestamp()) / 3600;
            for (p, v) in conc.iter().enumerate() {
                if let Some(v) = v {
                    series.set(h as usize, p, *v);
                }
            }
        }
        out.push(series);
    }
    Ok(out)
}

fn parse_hour(s: &str) -> Result<DateTime<Utc>> {
    let t = DateTime::parse_from_rfc3339(s.trim())
        .map_err(|e| Error::Parse(format!("bad time {s:?}: {e}")))?
        .with_timezone(&Utc);
    if t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
        return Err(Error::Parse(format!("time {s:?} is not on a whole hour")));
    }
    Ok(t)
}

fn parse_coord(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("{what} must be finite, got {v}")));
    }
    Ok(v)
}

/// Serialize series to CSV bytes, rows ordered by time then station id.
/// Invalid entries become empty cells.
pub fn write_station_csv(series: &[StationSeries]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(HEADER).map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    if series.is_empty() {
        return wtr.into_inner().map_err(|e| Error::Parse(format!("csv flush: {e}")));
    }
    let hours = series[0].hours();
    let mut order: Vec<usize> = (0..series.len()).collect();
    order.sort_by(|a, b| series[*a].station.id.cmp(&series[*b].station.id));
    for h in 0..hours {
        for &s_idx in &order {
            let s = &series[s_idx];
            if s.hours() != hours || s.start_time != series[0].start_time {
                return Err(Error::InvalidInput(
                    "all series must share one time axis to serialize".into(),
                ));
            }
            let mut rec: Vec<String> = vec![
                s.time_at(h).to_rfc3339_opts(SecondsFormat::Secs, true),
                s.station.id.clone(),
                s.station.lat.to_string(),
                s.station.lon.to_string(),
            ];
            for p in 0..N_POLLUTANTS {
                rec.push(s.get(h, p).map_or(String::new(), |v| v.to_string()));
            }
            wtr.write_record(&rec).map_err(|e| Error::Parse(format!("csv write: {e}")))?;
        }
    }
    wtr.into_inner().map_err(|e| Error::Parse(format!("csv flush: {e}")))
}

pub fn save_station_csv(path: &Path, series: &[StationSeries]) -> Result<()> {
    fs::write(path, write_station_csv(series)?)?;
    Ok(())
}

pub fn load_station_csv(path: &Path) -> Result<Vec<StationSeries>> {
    let bytes = fs::read(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    parse_station_csv(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    const SAMPLE: &str = "\
time,station_id,lat,lon,so2,no2,co,o3,pm25,pm10
2023-01-01T00:00:00Z,s1,30,120,5,30,0.8,60,40,70
2023-01-01T01:00:00Z,s1,30,120,6,,0.9,61,41,71
2023-01-01T00:00:00Z,s2,30.1,120.2,4,28,0.7,55,35,65
";

    #[test]
    fn parses_stations_and_gaps() {
        let series = parse_station_csv(SAMPLE.as_bytes()).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].station.id, "s1");
        assert_eq!(series[1].station.id, "s2");
        assert_eq!(series[0].hours(), 2);
        assert_eq!(series[0].get(0, 0), Some(5.0));
        assert_eq!(series[0].get(1, 1), None); // empty cell
        assert_eq!(series[1].get(1, 0), None); // row absent entirely
        assert_eq!(
            series[0].start_time,
            Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap()
        );
    }

    #[test]
    fn roundtrip_through_writer() {
        let series = parse_station_csv(SAMPLE.as_bytes()).unwrap();
        let bytes = write_station_csv(&series).unwrap();
        let back = parse_station_csv(&bytes).unwrap();
        assert_eq!(back.len(), series.len());
        for (a, b) in back.iter().zip(&series) {
            assert_eq!(a.station, b.station);
            assert_eq!(a.values, b.values);
            assert_eq!(a.valid, b.valid);
        }
    }

    #[test]
    fn rejects_wrong_header() {
        let bad = SAMPLE.replace("station_id", "station");
        assert!(matches!(parse_station_csv(bad.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_off_hour_time() {
        let bad = SAMPLE.replace("2023-01-01T01:00:00Z", "2023-01-01T01:30:00Z");
        assert!(parse_station_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn rejects_negative_and_non_numeric() {
        let neg = SAMPLE.replace("2023-01-01T01:00:00Z,s1,30,120,6", "2023-01-01T01:00:00Z,s1,30,120,-6");
        assert!(parse_station_csv(neg.as_bytes()).is_err());
        let txt = SAMPLE.replace("2023-01-01T01:00:00Z,s1,30,120,6", "2023-01-01T01:00:00Z,s1,30,120,abc");
        assert!(parse_station_csv(txt.as_bytes()).is_err());
    }

    #[test]
    fn rejects_conflicting_coordinates_and_duplicates() {
        let conflict = SAMPLE.replace("2023-01-01T01:00:00Z,s1,30,120", "2023-01-01T01:00:00Z,s1,31,120");
        assert!(parse_station_csv(conflict.as_bytes()).is_err());
        let mut dup = SAMPLE.to_string();
        dup.push_str("2023-01-01T00:00:00Z,s1,30,120,5,30,0.8,60,40,70\n");
        assert!(parse_station_csv(dup.as_bytes()).is_err());
    }

    #[test]
    fn rejects_empty_input() {
        assert!(parse_station_csv(b"").is_err());
        assert!(parse_station_csv(b"time,station_id,lat,lon,so2,no2,co,o3,pm25,pm10\n").is_err());
    }

    #[test]
    fn rejects_out_of_range_coordinates() {
        let bad = SAMPLE.replace("2023-01-01T00:00:00Z,s2,30.1,120.2", "2023-01-01T00:00:00Z,s2,95,120.2");
        assert!(parse_station_csv(bad.as_bytes()).is_err());
    }
}
