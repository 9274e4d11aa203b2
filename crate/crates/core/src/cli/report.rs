//! Training-curve and error-histogram plots plus the summary tables.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{report_from_table, ErrorStats, ImageResult};
use crate::trainer::MetricRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochPoint {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

/// Epoch records of a metrics log; a repeated epoch (from a resumed run)
/// keeps its last entry.
pub fn epoch_points(records: &[MetricRecord]) -> Vec<EpochPoint> {
    let mut by_epoch = BTreeMap::new();
    for r in records {
        if let MetricRecord::Epoch { epoch, lr, loss, val_mae, .. } = r {
            by_epoch.insert(
                *epoch,
                EpochPoint {
                    epoch: *epoch,
                    lr: *lr,
                    train_loss: loss.total,
                    val_mae: *val_mae,
                },
            );
        }
    }
    by_epoch.into_values().collect()
}

fn draw_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let span = (hi - lo).abs().max(1e-9);
    lo - 0.05 * span..hi + 0.05 * span
}

/// Two panels: mean training loss and validation MAE per epoch, one line
/// per run.
pub fn plot_training_curves(path: &Path, runs: &[(String, Vec<EpochPoint>)]) -> Result<()> {
    let runs: Vec<_> = runs.iter().filter(|(_, p)| !p.is_empty()).collect();
    if runs.is_empty() {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let max_epoch = runs.iter().flat_map(|(_, p)| p.iter().map(|q| q.epoch)).max().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, (900, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_error(path, e))?;
    let panels = root.split_evenly((2, 1));

    let series: [(&str, fn(&EpochPoint) -> Option<f64>); 2] = [
        ("training loss", |p| Some(p.train_loss)),
        ("validation MAE (deg)", |p| p.val_mae),
    ];
    for (area, (title, value)) in panels.iter().zip(series) {
        let values: Vec<f64> = runs.iter().flat_map(|(_, p)| p.iter().filter_map(value)).collect();
        if values.is_empty() {
            continue;
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(32)
            .y_label_area_size(56)
            .build_cartesian_2d(0f64..max_epoch as f64, padded(lo, hi))
            .map_err(|e| draw_error(path, e))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .draw()
            .map_err(|e| draw_error(path, e))?;
        for (i, (label, points)) in runs.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let line: Vec<(f64, f64)> = points.iter().filter_map(|p| value(p).map(|v| (p.epoch as f64, v))).collect();
            chart
                .draw_series(LineSeries::new(line, color.stroke_width(2)))
                .map_err(|e| draw_error(path, e))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| draw_error(path, e))?;
    }
    root.present().map_err(|e| draw_error(path, e))
}

/// Per-image angular errors, one translucent histogram per table on shared
/// bins.
pub fn plot_error_histogram(path: &Path, tables: &[(String, Vec<ImageResult>)], bins: usize) -> Result<()> {
    let all: Vec<f64> = tables.iter().flat_map(|(_, t)| t.iter().map(|r| r.mae_deg)).collect();
    if all.is_empty() || bins == 0 {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let hi = all.iter().copied().fold(0.0, f64::max).max(1e-6);
    let width = hi / bins as f64;
    let counts: Vec<Vec<usize>> = tables
        .iter()
        .map(|(_, t)| {
            let mut c = vec![0; bins];
            for r in t {
                c[((r.mae_deg / width) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();
    let top = counts.iter().flatten().copied().max().unwrap_or(1).max(1);

    let root = SVGBackend::new(path, (900, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_error(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("per-image angular error", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..hi * 1.02, 0f64..top as f64 * 1.1)
        .map_err(|e| draw_error(path, e))?;
    chart
        .configure_mesh()
        .x_desc("MAE (deg)")
        .y_desc("images")
        .draw()
        .map_err(|e| draw_error(path, e))?;
    for (i, ((label, _), c)) in tables.iter().zip(&counts).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let bars = c.iter().enumerate().map(|(b, &n)| {
            let x0 = b as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width, n as f64)], color.mix(0.45).filled())
        });
        chart
            .draw_series(bars)
            .map_err(|e| draw_error(path, e))?
            .label(label.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 14, y + 5)], color.mix(0.45).filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_error(path, e))?;
    root.present().map_err(|e| draw_error(path, e))
}

pub const SUMMARY_COLUMNS: [&str; 5] = ["Mean", "Median", "Tri.", "Best25%", "Worst25%"];

fn stats_row(name: &str, s: &ErrorStats) -> String {
    format!(
        "{:<24} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>9.3}\n",
        name, s.count, s.mean, s.median, s.trimean, s.best25, s.worst25
    )
}

/// One block per table: the overall row followed by a row per light count.
pub fn error_summary(tables: &[(String, Vec<ImageResult>)]) -> Result<String> {
    let mut out = format!(
        "{:<24} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "run", "count", SUMMARY_COLUMNS[0], SUMMARY_COLUMNS[1], SUMMARY_COLUMNS[2], SUMMARY_COLUMNS[3], SUMMARY_COLUMNS[4]
    );
    for (label, table) in tables {
        let report = report_from_table(table.clone(), Vec::new())?;
        out += &stats_row(label, &report.overall);
        for (k, s) in &report.per_light {
            out += &stats_row(&format!("  K={k}"), s);
        }
    }
    Ok(out)
}

/// Final and best epoch figures of each run.
pub fn training_summary(runs: &[(String, Vec<EpochPoint>)]) -> String {
    let mut out = format!(
        "{:<24} {:>6} {:>12} {:>12} {:>10} {:>10}\n",
        "run", "epochs", "final loss", "final val", "best val", "best epoch"
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    for (label, points) in runs {
        let Some(last) = points.last() else { continue };
        let best = points
            .iter()
            .filter_map(|p| p.val_mae.map(|v| (p.epoch, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        out += &format!(
            "{:<24} {:>6} {:>12.4} {:>12} {:>10} {:>10}\n",
            label,
            last.epoch,
            last.train_loss,
            fmt(last.val_mae),
            fmt(best.map(|b| b.1)),
            best.map_or("-".to_string(), |b| b.0.to_string())
        );
    }
    out
}
