//! Generates a small multi-illuminant dataset, writes it in the on-disk
//! format and checks that white balancing each input with its illuminant
//! map gives back the ground truth.
//!
//! ```text
//! cargo run --release --example synthetic_scenes -- [OUT_DIR]
//! ```

use transcc::data::{generate_dataset, read_dataset, write_dataset, GenConfig};
use transcc::imaging::{angle_between, white_balance, DEFAULT_EPSILON};

fn main() -> transcc::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_scenes".into());
    let config = GenConfig::default();
    let (records, manifest) = generate_dataset(&config, 20, 42, 4)?;
    write_dataset(&records, &manifest, out.as_ref())?;
    println!("{}", manifest.summary());
    println!("written to {out}");

    let (back, _) = read_dataset(out.as_ref())?;
    for r in back.iter().take(5) {
        let balanced = white_balance(&r.input, &r.illum, DEFAULT_EPSILON)?;
        let (h, w) = r.dims();
        let mut worst = 0.0f64;
        let mut spread = 0.0f64;
        let center = r.illum.pixel(h / 2, w / 2);
        for row in 0..h {
            for col in 0..w {
                if r.mask.is_included(row, col) {
                    let (b, g) = (balanced.pixel(row, col), r.gt.pixel(row, col));
                    worst = (0..3).fold(worst, |m, k| m.max((b[k] - g[k]).abs()));
                }
                spread = spread.max(angle_between(r.illum.pixel(row, col), center).unwrap_or(0.0));
            }
        }
        println!(
            "sample {:>3}: {} light(s), {:>4} masked pixels, illuminant spread {:5.2} deg, max |wb - gt| {:.1e}",
            r.meta.index,
            r.meta.num_lights,
            h * w - r.mask.included_count(),
            spread,
            worst
        );
    }
    Ok(())
}
