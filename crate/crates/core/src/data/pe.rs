//! Relative positional encodings for stations and grid cells.
//!
//! Offsets from a reference point are taken in degrees, converted to
//! radians for the trig functions, and scaled by the extent of the city's
//! grid so encodings stay comparable across cities of different sizes.

use crate::data::types::{GriddedField, Station};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Four-component encoding of one site relative to a reference point:
/// `[sin(Δlat)/lat_range, cos(Δlat)/lat_range, sin(Δlon)/lon_range,
/// cos(Δlon)/lon_range]`, with Δ the degree offset expressed in radians and
/// the ranges in degrees.
pub fn relative_pe(
    lat: f64,
    lon: f64,
    ref_lat: f64,
    ref_lon: f64,
    lat_range: f64,
    lon_range: f64,
) -> Result<[f64; 4]> {
    if !(lat_range > 0.0) || !(lon_range > 0.0) {
        return Err(Error::InvalidInput(format!(
            "positional encoding ranges must be positive, got ({lat_range}, {lon_range})"
        )));
    }
    let dlat = (lat - ref_lat).to_radians();
    let dlon = (lon - ref_lon).to_radians();
    Ok([
        dlat.sin() / lat_range,
        dlat.cos() / lat_range,
        dlon.sin() / lon_range,
        dlon.cos() / lon_range,
    ])
}

/// Mean station position; the reference point both encodings are relative
/// to.
pub fn centroid(stations: &[Station]) -> Result<(f64, f64)> {
    if stations.is_empty() {
        return Err(Error::InvalidInput("centroid of zero stations".into()));
    }
    let n = stations.len() as f64;
    let lat = stations.iter().map(|s| s.lat).sum::<f64>() / n;
    let lon = stations.iter().map(|s| s.lon).sum::<f64>() / n;
    Ok((lat, lon))
}

/// [4 × N_s] encoding matrix for a station list, relative to the station
/// centroid, scaled by the grid extent.
pub fn station_pe(stations: &[Station], grid: &GriddedField) -> Result<Tensor> {
    let (ref_lat, ref_lon) = centroid(stations)?;
    let (lat_range, lon_range) = grid_ranges(grid);
    let mut t = Tensor::zeros(&[4, stations.len()]);
    for (s_idx, st) in stations.iter().enumerate() {
        let pe = relative_pe(st.lat, st.lon, ref_lat, ref_lon, lat_range, lon_range)?;
        for (row, v) in pe.iter().enumerate() {
            t.set2(row, s_idx, *v);
        }
    }
    Ok(t)
}

/// [2 × H × W] encoding of every grid cell center relative to the station
/// centroid: `[sin(Δlat)/lat_range, sin(Δlon)/lon_range]`.
pub fn grid_pe(stations: &[Station], grid: &GriddedField) -> Result<Tensor> {
    let (ref_lat, ref_lon) = centroid(stations)?;
    let (lat_range, lon_range) = grid_ranges(grid);
    let (h, w) = (grid.n_lat, grid.n_lon);
    let mut t = Tensor::zeros(&[2, h, w]);
    for i in 0..h {
        for j in 0..w {
            let dlat = (grid.lat_at(i) - ref_lat).to_radians();
            let dlon = (grid.lon_at(j) - ref_lon).to_radians();
            t.set3(0, i, j, dlat.sin() / lat_range);
            t.set3(1, i, j, dlon.sin() / lon_range);
        }
    }
    Ok(t)
}

/// Degree spans of the grid. A single-row or single-column grid falls back
/// to one cell's resolution so the ranges stay positive.
fn grid_ranges(grid: &GriddedField) -> (f64, f64) {
    let lat = ((grid.n_lat.max(2) - 1) as f64) * grid.resolution;
    let lon = ((grid.n_lon.max(2) - 1) as f64) * grid.resolution;
    (lat, lon)
}
