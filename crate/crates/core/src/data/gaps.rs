//! Gap filling for station series.

use crate::data::types::{StationSeries, N_POLLUTANTS};
use crate::error::{Error, Result};

/// Fill interior gaps of at most `max_gap` consecutive missing hours by
/// linear interpolation between the bounding valid values. Longer gaps and
/// gaps touching either end of the series stay missing. Valid entries are
/// never altered.
pub fn fill_gaps(series: &StationSeries, max_gap: usize) -> Result<StationSeries> {
    if max_gap == 0 {
        return Err(Error::InvalidInput("max_gap must be at least 1".into()));
    }
    let hours = series.hours();
    let mut out = series.clone();
    for p in 0..N_POLLUTANTS {
        let mut h = 0;
        while h < hours {
            if series.get(h, p).is_some() {
                h += 1;
                continue;
            }
            let gap_start = h;
            while h < hours && series.get(h, p).is_none() {
                h += 1;
            }
            let gap_len = h - gap_start;
            let left = gap_start.checked_sub(1).and_then(|i| series.get(i, p));
            let right = if h < hours { series.get(h, p) } else { None };
            if gap_len <= max_gap {
                if let (Some(lv), Some(rv)) = (left, right) {
                    let span = (gap_len + 1) as f64;
                    for (k, hh) in (gap_start..gap_start + gap_len).enumerate() {
                        let w = (k + 1) as f64 / span;
                        out.set(hh, p, lv + (rv - lv) * w);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Station;
    use chrono::{TimeZone, Utc};

    fn series(values: &[Option<f64>]) -> StationSeries {
        let st = Station { id: "s".into(), lat: 0.0, lon: 0.0 };
        let t0 = Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap();
        let mut s = StationSeries::new(st, t0, values.len());
        for (h, v) in values.iter().enumerate() {
            if let Some(v) = v {
                s.set(h, 0, *v);
            }
        }
        s
    }

    fn col(s: &StationSeries) -> Vec<Option<f64>> {
        (0..s.hours()).map(|h| s.get(h, 0)).collect()
    }

    #[test]
    fn no_gaps_unchanged() {
        let s = series(&[Some(1.0), Some(2.0), Some(3.0)]);
        let f = fill_gaps(&s, 3).unwrap();
        assert_eq!(f.values, s.values);
        assert_eq!(f.valid, s.valid);
    }

    #[test]
    fn single_gap_linear_midpoint() {
        let s = series(&[Some(10.0), None, Some(20.0)]);
        let f = fill_gaps(&s, 1).unwrap();
        assert_eq!(col(&f), vec![Some(10.0), Some(15.0), Some(20.0)]);
    }

    #[test]
    fn gap_of_three_interpolates_evenly() {
        let s = series(&[Some(0.0), None, None, None, Some(4.0)]);
        let f = fill_gaps(&s, 3).unwrap();
        assert_eq!(col(&f), vec![Some(0.0), Some(1.0), Some(2.0), Some(3.0), Some(4.0)]);
    }

    #[test]
    fn long_gap_left_invalid() {
        let s = series(&[Some(1.0), None, None, None, None, Some(1.0)]);
        let f = fill_gaps(&s, 3).unwrap();
        assert_eq!(col(&f), col(&s));
    }

    #[test]
    fn boundary_gaps_left_invalid() {
        let s = series(&[None, Some(2.0), None]);
        let f = fill_gaps(&s, 3).unwrap();
        assert_eq!(col(&f), col(&s));
    }

    #[test]
    fn never_reduces_validity_and_preserves_valid_values() {
        let s = series(&[Some(5.0), None, Some(1.0), None, None, None, None, Some(2.0), None]);
        let f = fill_gaps(&s, 2).unwrap();
        let before: usize = s.valid.iter().filter(|v| **v).count();
        let after: usize = f.valid.iter().filter(|v| **v).count();
        assert!(after >= before);
        for h in 0..s.hours() {
            if let Some(v) = s.get(h, 0) {
                assert_eq!(f.get(h, 0), Some(v));
            }
        }
    }

    #[test]
    fn zero_max_gap_rejected() {
        let s = series(&[Some(1.0)]);
        assert!(fill_gaps(&s, 0).is_err());
    }
}
