//! Builds the full-size and the quarter-width network and prints parameter
//! counts and output shapes.

use candle_core::{DType, Device, Tensor};
use transcc::model::{ModelConfig, TransCC};

fn main() -> transcc::Result<()> {
    for (name, config, size) in [
        ("reference", ModelConfig::default(), 256),
        ("quarter width", ModelConfig { input_size: 64, width_multiplier: 0.25, ..ModelConfig::default() }, 64),
    ] {
        let model = TransCC::new(&config, 0, DType::F32)?;
        let image = (Tensor::ones((1, 3, size, size), DType::F32, &Device::Cpu)? * 0.5)?;
        let out = model.forward(&image)?;
        let z = model.encode_to_projection(&image)?;
        let attn = model.attention_maps(&image)?;
        println!("{name}: {} parameters, widths {:?}", model.params().parameter_count(), model.config().widths().stages);
        println!("  wb image    {:?}", out.wb_image.dims());
        println!("  weight map  {:?}", out.weight_map.dims());
        println!("  edge map    {:?}", out.edge_map.dims());
        println!("  bottleneck  {:?}", out.bottleneck.dims());
        println!("  projection  {:?}", z.dims());
        println!("  attention   {:?}", attn[0].dims());
    }
    Ok(())
}
