//! Angular error between illuminants: single vectors, per-pixel maps, and
//! the image-level MAE used for evaluation.

use transcc::imaging::{angle_between, angular_error_map, estimate_illuminant_map, IlluminantMap, LinearImage, PixelMask, DEFAULT_EPSILON};
use transcc::evaluation::image_mae;

fn main() -> transcc::Result<()> {
    let a = [1.0, 2.0, 1.0];
    let b = [1.0, 1.0, 1.0];
    println!("angle {a:?} vs {b:?}: {:.4} deg", angle_between(a, b).unwrap());
    println!("scaled by 7: {:.4} deg", angle_between([7.0, 14.0, 7.0], b).unwrap());

    // a left-to-right gradient from a reddish to a bluish light
    let (h, w) = (4, 8);
    let truth = IlluminantMap::new(
        h,
        w,
        (0..h * w)
            .flat_map(|i| {
                let t = (i % w) as f64 / (w - 1) as f64;
                [1.0 - 0.4 * t, 0.9, 0.6 + 0.4 * t]
            })
            .collect(),
    )?;
    let flat = IlluminantMap::new(h, w, [0.8, 0.9, 0.8].repeat(h * w))?;
    let errors = angular_error_map(&flat, &truth)?;
    for row in 0..1 {
        let line: Vec<String> = (0..w).map(|c| format!("{:.2}", errors.get(row, c))).collect();
        println!("single-light error along a row: {}", line.join(" "));
    }

    // image-level MAE: illuminants implied by a prediction versus the ground truth
    let gt = LinearImage::filled(h, w, [0.4, 0.4, 0.4])?;
    let input = LinearImage::new(h, w, gt.as_slice().iter().zip(truth.as_slice()).map(|(g, l)| g * l).collect())?;
    let recovered = estimate_illuminant_map(&input, &gt, DEFAULT_EPSILON)?;
    println!("recovered vs true illuminant, max {:.2e} deg", angular_error_map(&recovered, &truth)?.as_slice().iter().fold(0.0f64, |m, v| m.max(*v)));
    let mask = PixelMask::all(h, w);
    println!("MAE of doing nothing: {:.3} deg", image_mae(&input, &input, &gt, &mask)?);
    println!("MAE of the exact answer: {:.3} deg", image_mae(&input, &gt, &gt, &mask)?);
    Ok(())
}
