//! Per-image masked MAE, summary statistics, the per-light-count breakdown
//! and the single-illuminant reduction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_id, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{chromaticity, ChromaVector, LinearImage, PixelMask, DEFAULT_EPSILON};
use crate::losses;
use crate::model::TransCC;

/// Masked mean angular error in degrees between the illuminant maps
/// `input / pred` and `input / gt`.
pub fn image_mae(input: &LinearImage, pred: &LinearImage, gt: &LinearImage, mask: &PixelMask) -> Result<f64> {
    losses::mae_loss(input, pred, gt, mask, DEFAULT_EPSILON)
}

/// Summary of a list of per-image errors, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub q1: f64,
    pub q3: f64,
    pub best25: f64,
    pub worst25: f64,
    pub count: usize,
}

/// Quantile `q` of sorted values, linear interpolation between order
/// statistics at position `q·(n−1)`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn aggregate(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty error list".into()));
    }
    if let Some(v) = errors.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite error value {v}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let quarter = n.div_ceil(4);
    let mean_of = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    Ok(ErrorStats {
        mean: mean_of(&sorted),
        median,
        trimean: (q1 + 2.0 * median + q3) / 4.0,
        q1,
        q3,
        best25: mean_of(&sorted[..quarter]),
        worst25: mean_of(&sorted[n - quarter..]),
        count: n,
    })
}

pub const DEFAULT_BRIGHTNESS_FRACTION: f64 = 0.8;
pub const MIN_SELECTED_PIXELS: usize = 10;

/// Global illuminant from a per-pixel prediction: the normalized mean of
/// the unit illuminant chromaticities `input / max(pred, ε)` over the
/// brightest `brightness_fraction` of unmasked pixels, brightness being the
/// mean of the input's channels.
pub fn single_illuminant_estimate(
    input: &LinearImage,
    pred: &LinearImage,
    mask: &PixelMask,
    brightness_fraction: f64,
) -> Result<ChromaVector> {
    if !(brightness_fraction > 0.0 && brightness_fraction <= 1.0) {
        return Err(Error::Argument(format!("brightness fraction {brightness_fraction} must be in (0, 1]")));
    }
    if input.dims() != pred.dims() || input.dims() != mask.dims() {
        return Err(Error::Shape("single_illuminant_estimate: input, pred and mask differ in size".into()));
    }
    let (h, w) = input.dims();
    let mut candidates: Vec<(f64, usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.is_included(r, c))
        .map(|(r, c)| (input.pixel(r, c).iter().sum::<f64>() / 3.0, r, c))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    let keep = (brightness_fraction * candidates.len() as f64).round() as usize;
    if keep < MIN_SELECTED_PIXELS {
        return Err(Error::Argument(format!(
            "only {keep} pixels selected; at least {MIN_SELECTED_PIXELS} are required"
        )));
    }
    let mut sum = [0.0; 3];
    let mut used = 0;
    for &(_, r, c) in &candidates[..keep] {
        let (x, p) = (input.pixel(r, c), pred.pixel(r, c));
        let est = [x[0] / p[0].max(DEFAULT_EPSILON), x[1] / p[1].max(DEFAULT_EPSILON), x[2] / p[2].max(DEFAULT_EPSILON)];
        // black pixels carry no chromaticity
        if let Ok(u) = chromaticity(est) {
            for k in 0..3 {
                sum[k] += u.rgb()[k];
            }
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Numeric("every selected pixel is black".into()));
    }
    chromaticity(sum)
}

/// One row of the per-image results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub sample_id: String,
    pub num_lights: usize,
    pub mae_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: ErrorStats,
    /// Keyed by light count.
    pub per_light: BTreeMap<usize, ErrorStats>,
    pub images: Vec<ImageResult>,
    /// `(sample id, message)` of images whose prediction failed.
    pub failures: Vec<(String, String)>,
}

/// Scores `predict(record)` against every record. Failed predictions are
/// counted and skipped.
pub fn evaluate_with<F>(records: &[SampleRecord], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&SampleRecord) -> Result<LinearImage>,
{
    if records.is_empty() {
        return Err(Error::Argument("no records to evaluate".into()));
    }
    let mut images = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for r in records {
        let id = sample_id(r.meta.index);
        match predict(r).and_then(|pred| image_mae(&r.input, &pred, &r.gt, &r.mask)) {
            Ok(mae) => images.push(ImageResult {
                sample_id: id,
                num_lights: r.meta.num_lights,
                mae_deg: mae,
            }),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    report_from_table(images, failures)
}

pub fn report_from_table(images: Vec<ImageResult>, failures: Vec<(String, String)>) -> Result<EvalReport> {
    let all: Vec<f64> = images.iter().map(|i| i.mae_deg).collect();
    let overall = aggregate(&all)?;
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in &images {
        groups.entry(i.num_lights).or_default().push(i.mae_deg);
    }
    let per_light = groups
        .into_iter()
        .map(|(k, v)| Ok((k, aggregate(&v)?)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        overall,
        per_light,
        images,
        failures,
    })
}

/// Evaluates the network's white-balanced output.
pub fn evaluate_model(model: &TransCC, records: &[SampleRecord]) -> Result<EvalReport> {
    evaluate_with(records, |r| {
        let out = model.infer_image(&r.input)?;
        LinearImage::from_tensor(&out.wb_image)
    })
}

/// The identity predictor (`pred = input`); its MAE is the angle between
/// the true illuminant and neutral.
pub fn evaluate_identity(records: &[SampleRecord]) -> Result<EvalReport> {
    evaluate_with(records, |r| Ok(r.input.clone()))
}

pub fn write_table_csv(path: &Path, images: &[ImageResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in images {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_table_csv(path: &Path) -> Result<Vec<ImageResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Rows `Mean | Median | Tri. | Best25% | Worst25%` for the overall set and
/// each light count.
pub fn format_summary(report: &EvalReport) -> String {
    let mut out = format!(
        "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "subset", "count", "Mean", "Median", "Tri.", "Best25%", "Worst25%"
    );
    let row = |name: String, s: &ErrorStats| {
        format!(
            "{:<10} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>9.3}\n",
            name, s.count, s.mean, s.median, s.trimean, s.best25, s.worst25
        )
    };
    out += &row("all".into(), &report.overall);
    for (k, s) in &report.per_light {
        out += &row(format!("K={k}"), s);
    }
    if !report.failures.is_empty() {
        out += &format!("{} image(s) failed\n", report.failures.len());
    }
    out
}
