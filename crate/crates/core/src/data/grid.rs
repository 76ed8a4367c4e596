//! Gridded-field regridding and the on-disk grid file format.
//!
//! A grid file is a pair: a sidecar JSON header describing geometry,
//! channels, and timestamp, plus a binary payload of little-endian 32-bit
//! floats laid out channel-major, then latitude rows, then longitude
//! columns.

use std::fs;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::data::types::GriddedField;
use crate::error::{Error, Result};

/// Resample a field onto a finer or coarser grid with the same origin, by
/// bilinear interpolation of the four surrounding source cell centers. The
/// target covers the largest grid at `target_resolution` that stays inside
/// the source extent.
pub fn bilinear_regrid(field: &GriddedField, target_resolution: f64) -> Result<GriddedField> {
    field.validate()?;
    if !(target_resolution.is_finite() && target_resolution > 0.0) {
        return Err(Error::InvalidInput(format!(
            "target resolution {target_resolution} must be > 0"
        )));
    }
    let lat_extent = (field.n_lat - 1) as f64 * field.resolution;
    let lon_extent = (field.n_lon - 1) as f64 * field.resolution;
    let eps = 1e-9;
    let n_lat = ((lat_extent / target_resolution) + eps).floor() as usize + 1;
    let n_lon = ((lon_extent / target_resolution) + eps).floor() as usize + 1;
    let mut out = GriddedField::zeros(
        field.origin_lat,
        field.origin_lon,
        target_resolution,
        n_lat,
        n_lon,
        field.channels.clone(),
        field.time,
    );
    for c in 0..field.n_channels() {
        for i in 0..n_lat {
            let lat = out.lat_at(i);
            for j in 0..n_lon {
                let lon = out.lon_at(j);
                out.set(c, i, j, field.sample(c, lat, lon)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct GridHeader {
    origin_lat: f64,
    origin_lon: f64,
    resolution: f64,
    n_lat: usize,
    n_lon: usize,
    channels: Vec<String>,
    time: String,
}

fn format_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub(crate) fn parse_time(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::Parse(format!("timestamp {s:?}: {e}")))
}

/// Serialize a field to its header JSON and f32 payload bytes.
pub fn encode_grid(field: &GriddedField) -> Result<(String, Vec<u8>)> {
    field.validate()?;
    let header = GridHeader {
        origin_lat: field.origin_lat,
        origin_lon: field.origin_lon,
        resolution: field.resolution,
        n_lat: field.n_lat,
        n_lon: field.n_lon,
        channels: field.channels.clone(),
        time: format_time(field.time),
    };
    let json = serde_json::to_string_pretty(&header)?;
    let mut payload = Vec::with_capacity(field.data.len() * 4);
    for &v in &field.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok((json, payload))
}

/// Parse a field from header JSON and payload bytes.
pub fn decode_grid(header_json: &str, payload: &[u8]) -> Result<GriddedField> {
    let header: GridHeader =
        serde_json::from_str(header_json).map_err(|e| Error::Parse(format!("grid header: {e}")))?;
    if header.n_lat == 0 || header.n_lon == 0 || header.channels.is_empty() {
        return Err(Error::Parse("grid header declares an empty grid".into()));
    }
    let cells = header
        .channels
        .len()
        .checked_mul(header.n_lat)
        .and_then(|n| n.checked_mul(header.n_lon))
        .ok_or_else(|| Error::Parse("grid dimensions overflow".into()))?;
    let expected = cells
        .checked_mul(4)
        .ok_or_else(|| Error::Parse("grid payload size overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Parse(format!(
            "grid payload holds {} bytes, header expects {expected}",
            payload.len()
        )));
    }
    let time = parse_time(&header.time)?;
    let mut data = Vec::with_capacity(cells);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        data.push(v as f64);
    }
    let field = GriddedField {
        origin_lat: header.origin_lat,
        origin_lon: header.origin_lon,
        resolution: header.resolution,
        n_lat: header.n_lat,
        n_lon: header.n_lon,
        channels: header.channels,
        time,
        data,
    };
    field.validate().map_err(|e| Error::Parse(format!("grid file invalid: {e}")))?;
    Ok(field)
}

/// Write `<stem>.json` and `<stem>.bin` under `dir`.
pub fn save_grid(dir: &Path, stem: &str, field: &GriddedField) -> Result<()> {
    let (json, payload) = encode_grid(field)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    fs::write(dir.join(format!("{stem}.bin")), payload)?;
    Ok(())
}

/// Read the pair written by [`save_grid`], given the path of the JSON side.
pub fn load_grid(json_path: &Path) -> Result<GriddedField> {
    let json = fs::read_to_string(json_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", json_path.display())))?;
    let bin_path = json_path.with_extension("bin");
    let payload =
        fs::read(&bin_path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", bin_path.display())))?;
    decode_grid(&json, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn field_from_fn(n_lat: usize, n_lon: usize, res: f64, f: impl Fn(f64, f64) -> f64) -> GriddedField {
        let time = Utc.with_ymd_and_hms(2023, 6, 1, 12, 0, 0).unwrap();
        let mut g = GriddedField::zeros(10.0, 100.0, res, n_lat, n_lon, vec!["x".into()], time);
        for i in 0..n_lat {
            for j in 0..n_lon {
                g.set(0, i, j, f(g.lat_at(i), g.lon_at(j)));
            }
        }
        g
    }

    #[test]
    fn regrid_preserves_constants() {
        let src = field_from_fn(5, 5, 0.4, |_, _| 3.25);
        let out = bilinear_regrid(&src, 0.1).unwrap();
        assert_eq!(out.n_lat, 17);
        assert_eq!(out.n_lon, 17);
        assert!(out.data.iter().all(|v| (v - 3.25).abs() < 1e-10));
    }

    #[test]
    fn regrid_exact_on_bilinear_functions() {
        let src = field_from_fn(6, 4, 0.5, |lat, lon| 2.0 * lat - 3.0 * lon + 0.25 * lat * lon);
        let out = bilinear_regrid(&src, 0.25).unwrap();
        for i in 0..out.n_lat {
            for j in 0..out.n_lon {
                let expect =
                    2.0 * out.lat_at(i) - 3.0 * out.lon_at(j) + 0.25 * out.lat_at(i) * out.lon_at(j);
                assert!((out.at(0, i, j) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn regrid_exact_at_source_centers() {
        let src = field_from_fn(4, 4, 0.3, |lat, lon| (lat * 1.7).sin() + (lon * 0.9).cos());
        let out = bilinear_regrid(&src, 0.15).unwrap();
        // every second target center coincides with a source center
        for i in 0..src.n_lat {
            for j in 0..src.n_lon {
                assert!((out.at(0, 2 * i, 2 * j) - src.at(0, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regrid_rejects_bad_resolution() {
        let src = field_from_fn(4, 4, 0.3, |_, _| 1.0);
        assert!(bilinear_regrid(&src, 0.0).is_err());
        assert!(bilinear_regrid(&src, -1.0).is_err());
    }

    #[test]
    fn grid_file_roundtrip_is_bit_exact_for_f32_values() {
        // values chosen representable in f32 so quantization is exact
        let mut src = field_from_fn(3, 4, 0.5, |_, _| 0.0);
        for (k, v) in src.data.iter_mut().enumerate() {
            *v = (k as f32 * 0.25 - 1.5) as f64;
        }
        let (json, payload) = encode_grid(&src).unwrap();
        let back = decode_grid(&json, &payload).unwrap();
        assert_eq!(back, src);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut src = field_from_fn(3, 3, 1.0, |_, _| 0.0);
        for (k, v) in src.data.iter_mut().enumerate() {
            *v = k as f64; // small integers survive f32 exactly
        }
        save_grid(dir.path(), "frame0", &src).unwrap();
        let back = load_grid(&dir.path().join("frame0.json")).unwrap();
        assert_eq!(back, src);
    }

    #[test]
    fn decode_rejects_malformed_inputs() {
        assert!(decode_grid("not json", &[]).is_err());
        let header = r#"{"origin_lat":0,"origin_lon":0,"resolution":1,
            "n_lat":2,"n_lon":2,"channels":["a"],"time":"2023-01-01T00:00:00Z"}"#;
        assert!(decode_grid(header, &[0u8; 15]).is_err()); // short payload
        assert!(decode_grid(header, &[0u8; 17]).is_err()); // long payload
        let bad_time = header.replace("2023-01-01T00:00:00Z", "yesterday");
        assert!(decode_grid(&bad_time, &[0u8; 16]).is_err());
        let nan_payload: Vec<u8> = f32::NAN
            .to_le_bytes()
            .iter()
            .chain([0u8; 12].iter())
            .copied()
            .collect();
        assert!(decode_grid(header, &nan_payload).is_err());
    }
}
