use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use crate::error::{Error, Result};

/// One CSV line: a single metric of a single generated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub weight: f64,
    pub seed: u64,
    pub sample: usize,
    pub metric: String,
    pub value: f64,
}

pub fn metric_rows(variant: &str, reports: &[MetricReport]) -> Vec<MetricRow> {
    reports
        .iter()
        .flat_map(|r| {
            MetricReport::NAMES.iter().zip(r.values()).map(move |(name, value)| MetricRow {
                variant: variant.to_string(),
                weight: r.weight,
                seed: r.seed,
                sample: r.sample,
                metric: name.to_string(),
                value,
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Mean of each metric per guidance weight, from metric rows.
pub fn means_by_weight(rows: &[MetricRow]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry(r.metric.clone())
            .or_default()
            .entry(r.weight.to_bits())
            .or_insert((r.weight, 0.0, 0));
        e.1 += r.value;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(m, by_w)| {
            let mut pts: Vec<(f64, f64)> = by_w.into_values().map(|(w, s, n)| (w, s / n as f64)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m, pts)
        })
        .collect()
}

/// One line per metric against guidance weight, each normalised to its maximum.
pub fn plot_weight_curves(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let series = means_by_weight(rows);
    if series.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let (lo, hi) = series
        .values()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (w, _)| (a.min(*w), b.max(*w)));
    let plot_err = |e: String| Error::io(path, std::io::Error::other(e));
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("metric analogs vs guidance weight (scaled to max)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(lo..hi.max(lo + 1e-9), -1.05f64..1.05)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("guidance weight s")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let scale = pts.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1e-12);
        let color = Palette99::pick(i).to_rgba();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|(w, v)| (*w, v / scale)).collect();
        chart
            .draw_series(LineSeries::new(scaled.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(scaled.iter().map(|p| Circle::new(*p, 3, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}
