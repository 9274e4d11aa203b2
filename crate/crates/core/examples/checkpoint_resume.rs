//! Trains a tiny network for two epochs, stops, reloads the checkpoint and
//! finishes; the resumed losses equal those of an uninterrupted run.

use transcc::data::{generate_dataset, GenConfig};
use transcc::model::ModelConfig;
use transcc::trainer::{lr_schedule, Checkpoint, TrainConfig, Trainer, LATEST_CHECKPOINT};

fn main() -> transcc::Result<()> {
    let model = ModelConfig {
        input_size: 32,
        base_channels: 8,
        stage_channels: [8, 8, 16, 16],
        attention_heads: 2,
        projection_dim: 16,
        norm_groups: 4,
        ..ModelConfig::default()
    };
    let config = TrainConfig { epochs: 4, decay_start_epoch: 2, image_size: 32, anchors: 4, negatives: 4, ..TrainConfig::default() };
    for e in 0..=config.epochs {
        print!("lr({e}) = {:.1e}  ", lr_schedule(e, &config)?);
    }
    println!();

    let (records, _) = generate_dataset(&GenConfig { height: 32, width: 32, ..GenConfig::default() }, 8, 1, 2)?;
    let (train, val) = records.split_at(6);
    let losses = |t: &mut Trainer, until: usize, dir: Option<&std::path::Path>| -> transcc::Result<Vec<f64>> {
        let mut out = Vec::new();
        t.run(train, val, dir, until, &mut |s| {
            println!("  epoch {} loss {:.5} val MAE {:.3}", s.epoch, s.train.total, s.val_mae.unwrap_or(f64::NAN));
            out.push(s.train.total);
        })?;
        Ok(out)
    };

    println!("uninterrupted:");
    let straight = losses(&mut Trainer::new(&model, &config)?, 4, None)?;

    let dir = std::env::temp_dir().join("transcc_checkpoint_resume");
    let _ = std::fs::remove_dir_all(&dir);
    println!("first half:");
    let mut first = losses(&mut Trainer::new(&model, &config)?, 2, Some(&dir))?;
    let ckpt = Checkpoint::load(&dir.join(LATEST_CHECKPOINT))?;
    println!("checkpoint at epoch {}, step {}, {} tensors", ckpt.epoch, ckpt.step, ckpt.params.len());
    println!("resumed:");
    first.extend(losses(&mut Trainer::from_checkpoint(ckpt)?, 4, Some(&dir))?);
    println!("identical: {}", first == straight);
    Ok(())
}
