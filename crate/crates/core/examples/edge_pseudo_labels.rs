//! Sobel gradient-magnitude pseudo labels for the edge head.

use transcc::data::{pseudo_edge_labels, PseudoLabeler, SobelLabeler};
use transcc::data::{generate_record, GenConfig};
use transcc::imaging::LinearImage;

fn main() -> transcc::Result<()> {
    // a vertical step: the response peaks on the two columns at the edge
    let step = LinearImage::from_fn(6, 8, |_, c| if c < 4 { [0.1; 3] } else { [0.9; 3] })?;
    let edges = pseudo_edge_labels(&step);
    let row: Vec<String> = (0..8).map(|c| format!("{:.2}", edges.get(3, c))).collect();
    println!("step edge, one row: {}", row.join(" "));

    // stored labels come from the surface before the mask is cut out, so
    // they differ from these around the masked rectangle
    let sample = generate_record(&GenConfig::default(), 3, 0)?;
    let labels = SobelLabeler.label(&sample.gt);
    let v = labels.as_slice();
    let strong = v.iter().filter(|&&x| x > 0.5).count();
    println!(
        "generated sample: {}x{}, labels in [{:.2}, {:.2}], {:.1}% above 0.5",
        labels.height(),
        labels.width(),
        v.iter().copied().fold(f64::INFINITY, f64::min),
        v.iter().copied().fold(0.0, f64::max),
        100.0 * strong as f64 / v.len() as f64,
    );
    Ok(())
}
