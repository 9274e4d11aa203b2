//! The six training losses for one generated sample and an untrained
//! network, and the weighted total.

use transcc::data::{generate_dataset, GenConfig};
use transcc::losses::LossWeights;
use transcc::model::ModelConfig;
use transcc::trainer::{TrainConfig, Trainer};

fn main() -> transcc::Result<()> {
    let data = GenConfig { height: 64, width: 64, ..GenConfig::default() };
    let (records, _) = generate_dataset(&data, 1, 9, 1)?;
    let model = ModelConfig { input_size: 64, width_multiplier: 0.25, ..ModelConfig::default() };
    for (name, weights) in [
        ("all terms", LossWeights::default()),
        ("no surf_sim / contrastive", LossWeights { surf_sim: 0.0, contrastive: 0.0, ..LossWeights::default() }),
    ] {
        let config = TrainConfig { image_size: 64, weights, ..TrainConfig::default() };
        let mut trainer = Trainer::new(&model, &config)?;
        let (_, report, _) = trainer.losses(&[&records[0]])?;
        println!("{name}:");
        println!("  achromatic  {:>9.4} x {}", report.achromatic, weights.achromatic);
        println!("  edge        {:>9.4} x {}", report.edge, weights.edge);
        println!("  l1          {:>9.4} x {}", report.l1, weights.l1);
        println!("  mae (deg)   {:>9.4} x {}", report.mae, weights.mae);
        println!("  surf_sim    {:>9.4} x {}", report.surf_sim, weights.surf_sim);
        println!("  contrastive {:>9.4} x {}", report.contrastive, weights.contrastive);
        println!("  total       {:>9.4}", report.total);
    }
    Ok(())
}
