//! Error statistics of simple predictors on a generated test set, broken
//! down by number of lights: doing nothing, and a single global illuminant
//! taken from the brightest pixels.

use transcc::data::{generate_dataset, GenConfig};
use transcc::evaluation::{evaluate_identity, evaluate_with, format_summary, single_illuminant_estimate, DEFAULT_BRIGHTNESS_FRACTION};
use transcc::imaging::LinearImage;

fn main() -> transcc::Result<()> {
    let (records, _) = generate_dataset(&GenConfig::default(), 60, 11, 4)?;

    println!("identity (output = input):");
    print!("{}", format_summary(&evaluate_identity(&records)?));

    // one light for the whole image, estimated from the input alone
    let global = evaluate_with(&records, |r| {
        // a constant unit prediction makes the estimate a mean input chromaticity
        let (h, w) = r.dims();
        let ones = LinearImage::filled(h, w, [1.0; 3])?;
        let light = single_illuminant_estimate(&r.input, &ones, &r.mask, DEFAULT_BRIGHTNESS_FRACTION)?;
        let l = light.rgb().map(|v| v * 3f64.sqrt());
        LinearImage::from_fn(h, w, |row, col| {
            let p = r.input.pixel(row, col);
            [p[0] / l[0], p[1] / l[1], p[2] / l[2]]
        })
    })?;
    println!("\nglobal illuminant from bright pixels:");
    print!("{}", format_summary(&global));

    // the oracle global light: the mean true illuminant, which single-light methods cannot beat
    let oracle = evaluate_with(&records, |r| {
        let n = r.illum.pixel_count() as f64;
        let mut mean = [0.0; 3];
        for p in r.illum.pixels() {
            for k in 0..3 {
                mean[k] += p[k] / n;
            }
        }
        let (h, w) = r.dims();
        LinearImage::from_fn(h, w, |row, col| {
            let p = r.input.pixel(row, col);
            [p[0] / mean[0], p[1] / mean[1], p[2] / mean[2]]
        })
    })?;
    println!("\nbest single global illuminant (uses ground truth):");
    print!("{}", format_summary(&oracle));
    Ok(())
}
