//! Lead-hour curve artifacts: one CSV and one SVG per metric, one curve per
//! pollutant. The SVG is rendered from the CSV text alone, so a later
//! re-render from the written CSV reproduces the image byte for byte.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::metrics::Metrics;
use crate::eval::report::{MetricsReport, METRIC_NAMES};

pub const PLOT_CSV_HEADER: &str = "pollutant,lead_hour,metric,value,n_pairs";

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotArtifact {
    pub metric: String,
    pub csv: String,
    pub svg: String,
}

fn metric_value(m: &Metrics, name: &str) -> Option<f64> {
    match name {
        "R" => m.r,
        "RMSE" => Some(m.rmse),
        "rRMSE" => m.rrmse,
        "MRE" => m.mre,
        "MAE" => Some(m.mae),
        _ => None,
    }
}

/// Flat per-metric table: one row per (pollutant, scored lead hour), value
/// cell empty when the metric is undefined there.
pub fn metric_csv(report: &MetricsReport, metric: &str) -> Result<String> {
    if !METRIC_NAMES.contains(&metric) {
        return Err(Error::InvalidInput(format!(
            "unknown metric {metric:?}; expected one of {METRIC_NAMES:?}"
        )));
    }
    let mut out = String::from(PLOT_CSV_HEADER);
    out.push('\n');
    let mut rows = 0usize;
    for pol in &report.pollutants {
        for lm in &pol.by_lead {
            let cell = match metric_value(&lm.metrics, metric) {
                Some(v) => v.to_string(),
                None => String::new(),
            };
            writeln!(out, "{},{},{},{},{}", pol.pollutant, lm.lead_hour, metric, cell, lm.metrics.n_pairs)
                .expect("string write");
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::InsufficientData(format!(
            "report for {:?} has no scored lead hours to plot",
            report.city
        )));
    }
    Ok(out)
}

struct CsvRow {
    pollutant: String,
    lead: u32,
    value: Option<f64>,
}

fn parse_rows(csv: &str) -> Result<(String, Vec<CsvRow>)> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h == PLOT_CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "plot CSV must start with {PLOT_CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut metric: Option<String> = None;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "plot CSV line {}: expected 5 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let lead: u32 = fields[1]
            .parse()
            .map_err(|_| Error::Parse(format!("plot CSV line {}: bad lead hour {:?}", i + 2, fields[1])))?;
        match &metric {
            None => metric = Some(fields[2].to_string()),
            Some(m) if m == fields[2] => {}
            Some(m) => {
                return Err(Error::Parse(format!(
                    "plot CSV line {}: mixed metrics {m:?} and {:?}",
                    i + 2,
                    fields[2]
                )))
            }
        }
        let value = if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].parse::<f64>().map_err(|_| {
                Error::Parse(format!("plot CSV line {}: bad value {:?}", i + 2, fields[3]))
            })?)
        };
        rows.push(CsvRow { pollutant: fields[0].to_string(), lead, value });
    }
    match metric {
        Some(m) if !rows.is_empty() => Ok((m, rows)),
        _ => Err(Error::Parse("plot CSV has no data rows".into())),
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Render the line chart described by a per-metric CSV. Pure function of
/// the CSV text: identical input bytes give identical SVG bytes.
pub fn svg_from_csv(csv: &str) -> Result<String> {
    let (metric, rows) = parse_rows(csv)?;

    let mut curves: Vec<(String, Vec<(u32, Option<f64>)>)> = Vec::new();
    for r in rows {
        match curves.iter_mut().find(|(p, _)| *p == r.pollutant) {
            Some((_, pts)) => pts.push((r.lead, r.value)),
            None => curves.push((r.pollutant, vec![(r.lead, r.value)])),
        }
    }
    for (_, pts) in &mut curves {
        pts.sort_by_key(|(l, _)| *l);
    }

    let leads: Vec<u32> = {
        let mut all: Vec<u32> =
            curves.iter().flat_map(|(_, pts)| pts.iter().map(|(l, _)| *l)).collect();
        all.sort_unstable();
        all.dedup();
        all
    };
    let (xmin, xmax) = (leads[0] as f64, *leads.last().unwrap() as f64);
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };

    let finite: Vec<f64> = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().filter_map(|(_, v)| *v))
        .filter(|v| v.is_finite())
        .collect();
    let (ymin, ymax) = match (
        finite.iter().cloned().reduce(f64::min),
        finite.iter().cloned().reduce(f64::max),
    ) {
        (Some(lo), Some(hi)) if hi > lo => {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
        (Some(lo), Some(_)) => (lo - 0.5, lo + 0.5),
        _ => (0.0, 1.0),
    };
    let yspan = ymax - ymin;

    let px = |lead: f64| MARGIN_L + (lead - xmin) / xspan * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |v: f64| HEIGHT - MARGIN_B - (v - ymin) / yspan * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    )
    .expect("string write");
    writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").expect("string write");
    writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{metric} by lead hour</text>",
        fmt2((MARGIN_L + WIDTH - MARGIN_R) / 2.0)
    )
    .expect("string write");

    // axes
    writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt2(MARGIN_L),
        fmt2(HEIGHT - MARGIN_B),
        fmt2(WIDTH - MARGIN_R),
        fmt2(HEIGHT - MARGIN_B)
    )
    .expect("string write");
    writeln!(
        svg,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        fmt2(MARGIN_L),
        fmt2(MARGIN_T),
        fmt2(MARGIN_L),
        fmt2(HEIGHT - MARGIN_B)
    )
    .expect("string write");

    // y ticks
    for i in 0..=4 {
        let v = ymin + yspan * i as f64 / 4.0;
        let y = py(v);
        writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            fmt2(MARGIN_L - 4.0),
            fmt2(y),
            fmt2(MARGIN_L),
            fmt2(y)
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            fmt2(MARGIN_L - 7.0),
            fmt2(y + 4.0),
            format_args!("{v:.3}")
        )
        .expect("string write");
    }

    // x ticks: at most 13, thinned evenly over the scored leads
    let step = leads.len().div_ceil(13).max(1);
    for lead in leads.iter().step_by(step) {
        let x = px(*lead as f64);
        writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            fmt2(x),
            fmt2(HEIGHT - MARGIN_B),
            fmt2(x),
            fmt2(HEIGHT - MARGIN_B + 4.0)
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{lead}</text>",
            fmt2(x),
            fmt2(HEIGHT - MARGIN_B + 17.0)
        )
        .expect("string write");
    }
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">lead hour</text>",
        fmt2((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt2(HEIGHT - 12.0)
    )
    .expect("string write");

    // one polyline per gap-free run of each curve
    for (ci, (pollutant, pts)) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, svg: &mut String| {
            if seg.len() >= 2 {
                writeln!(
                    svg,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    seg.join(" ")
                )
                .expect("string write");
            }
            seg.clear();
        };
        for (lead, value) in pts {
            match value {
                Some(v) if v.is_finite() => {
                    segment.push(format!("{},{}", fmt2(px(*lead as f64)), fmt2(py(*v))))
                }
                _ => flush(&mut segment, &mut svg),
            }
        }
        flush(&mut segment, &mut svg);

        let ly = MARGIN_T + 8.0 + ci as f64 * 18.0;
        writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            fmt2(WIDTH - MARGIN_R + 10.0),
            fmt2(ly),
            fmt2(WIDTH - MARGIN_R + 34.0),
            fmt2(ly)
        )
        .expect("string write");
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{pollutant}</text>",
            fmt2(WIDTH - MARGIN_R + 40.0),
            fmt2(ly + 4.0)
        )
        .expect("string write");
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Every metric's CSV and its derived SVG, in `METRIC_NAMES` order.
pub fn plot_artifacts(report: &MetricsReport) -> Result<Vec<PlotArtifact>> {
    METRIC_NAMES
        .iter()
        .map(|metric| {
            let csv = metric_csv(report, metric)?;
            let svg = svg_from_csv(&csv)?;
            Ok(PlotArtifact { metric: metric.to_string(), csv, svg })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::report::{LeadMetrics, PollutantReport};

    fn metrics(v: f64, with_ratios: bool) -> Metrics {
        Metrics {
            n_pairs: 10,
            mre_excluded: 0,
            r: if with_ratios { Some(0.9) } else { None },
            rmse: v,
            rrmse: with_ratios.then_some(v / 2.0),
            mre: with_ratios.then_some(v / 3.0),
            mae: v * 0.8,
        }
    }

    fn two_pollutant_report() -> MetricsReport {
        let leads = |base: f64, with_ratios: bool| {
            (1..=3)
                .map(|l| LeadMetrics { lead_hour: l, metrics: metrics(base + l as f64, with_ratios) })
                .collect()
        };
        MetricsReport {
            city: "t".into(),
            n_bundles: 2,
            n_pairs: 60,
            pollutants: vec![
                PollutantReport { pollutant: "pm25".into(), by_lead: leads(1.0, true), by_window: vec![] },
                PollutantReport { pollutant: "o3".into(), by_lead: leads(2.0, false), by_window: vec![] },
            ],
        }
    }

    #[test]
    fn csv_has_one_row_per_pollutant_and_lead() {
        let report = two_pollutant_report();
        let csv = metric_csv(&report, "RMSE").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], PLOT_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[1], "pm25,1,RMSE,2,10");
        assert!(lines.iter().skip(1).all(|l| l.split(',').nth(2) == Some("RMSE")));
    }

    #[test]
    fn missing_values_keep_their_rows() {
        let report = two_pollutant_report();
        let csv = metric_csv(&report, "R").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3);
        // o3 rows carry no R value but still appear
        assert_eq!(lines[4], "o3,1,R,,10");
        let svg = svg_from_csv(&csv).unwrap();
        // only the pm25 curve survives as a polyline
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn unknown_metric_is_rejected() {
        assert!(matches!(
            metric_csv(&two_pollutant_report(), "MAPE"),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn artifacts_cover_all_metrics_and_rerender_identically() {
        let report = two_pollutant_report();
        let arts = plot_artifacts(&report).unwrap();
        assert_eq!(
            arts.iter().map(|a| a.metric.as_str()).collect::<Vec<_>>(),
            vec!["R", "RMSE", "rRMSE", "MRE", "MAE"]
        );
        for a in &arts {
            assert_eq!(svg_from_csv(&a.csv).unwrap(), a.svg);
            assert!(a.svg.starts_with("<svg "));
            assert!(a.svg.ends_with("</svg>\n"));
        }
        assert_eq!(plot_artifacts(&report).unwrap(), arts);
    }

    #[test]
    fn chart_draws_one_curve_per_pollutant() {
        let csv = metric_csv(&two_pollutant_report(), "MAE").unwrap();
        let svg = svg_from_csv(&csv).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">pm25</text>"));
        assert!(svg.contains(">o3</text>"));
        assert!(svg.contains("MAE by lead hour"));
        assert!(svg.contains(">lead hour</text>"));
    }

    #[test]
    fn gaps_split_a_curve_into_segments() {
        let csv = format!(
            "{PLOT_CSV_HEADER}\npm25,1,MAE,1.0,5\npm25,2,MAE,,5\npm25,3,MAE,1.2,5\npm25,4,MAE,1.3,5\n"
        );
        let svg = svg_from_csv(&csv).unwrap();
        // the lone point before the gap cannot form a line; 3..4 can
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn malformed_csv_is_reported() {
        for bad in [
            "lead,stuff\n1,2",
            &format!("{PLOT_CSV_HEADER}\npm25,abc,MAE,1.0,5"),
            &format!("{PLOT_CSV_HEADER}\npm25,1,MAE,huh,5"),
            &format!("{PLOT_CSV_HEADER}\npm25,1,MAE,1.0,5\npm25,2,RMSE,1.0,5"),
            &format!("{PLOT_CSV_HEADER}\npm25,1,MAE,1.0\n"),
            PLOT_CSV_HEADER,
        ] {
            assert!(matches!(svg_from_csv(bad), Err(Error::Parse(_))), "{bad:?}");
        }
    }

    #[test]
    fn empty_report_cannot_be_plotted() {
        let report = MetricsReport { city: "t".into(), n_bundles: 0, n_pairs: 0, pollutants: vec![] };
        assert!(matches!(metric_csv(&report, "MAE"), Err(Error::InsufficientData(_))));
    }
}
