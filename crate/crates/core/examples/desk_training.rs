//! Desk-scale training run: generate 300/50 train/val samples at 64×64,
//! score the identity baseline, train a quarter-width network for 30 epochs
//! and compare per light count.
//!
//! ```text
//! cargo run --release --example desk_training -- [OUT_DIR] [--ablate]
//! ```
//!
//! `--ablate` zeroes the patch-similarity and contrastive weights.

use std::path::PathBuf;
use std::time::Instant;

use transcc::cli::RunConfig;
use transcc::data::{generate_dataset, Split};
use transcc::evaluation::{evaluate_identity, evaluate_model, format_summary};
use transcc::trainer::Trainer;

fn main() -> transcc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ablate = args.iter().any(|a| a == "--ablate");
    let out = args.iter().find(|a| !a.starts_with("--")).map(PathBuf::from);

    let mut cfg = RunConfig::desk();
    if ablate {
        cfg.train.weights.surf_sim = 0.0;
        cfg.train.weights.contrastive = 0.0;
    }
    let started = Instant::now();
    let (records, manifest) = generate_dataset(&cfg.data, cfg.count, cfg.seed, cfg.effective_threads())?;
    let pick = |split: Split| {
        let ids = manifest.splits.get(split);
        records
            .iter()
            .filter(|r| ids.contains(&transcc::data::sample_id(r.meta.index)))
            .cloned()
            .collect::<Vec<_>>()
    };
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    println!("{}", manifest.summary());

    let baseline = evaluate_identity(&val)?;
    println!("identity baseline on val:\n{}", format_summary(&baseline));

    let mut trainer = Trainer::new(&cfg.model, &cfg.train)?;
    println!("{} parameters", trainer.model().params().parameter_count());
    trainer.fit(&train, &val, out.as_deref(), &mut |s| {
        println!(
            "epoch {:>2} lr {:.2e} loss {:.4} val MAE {:.3}  ({:.0}s)",
            s.epoch,
            s.lr,
            s.train.total,
            s.val_mae.unwrap_or(f64::NAN),
            started.elapsed().as_secs_f64()
        );
    })?;

    let trained = evaluate_model(trainer.model(), &val)?;
    println!("trained model on val:\n{}", format_summary(&trained));
    println!(
        "mean MAE {:.3} vs identity {:.3} (ratio {:.3})",
        trained.overall.mean,
        baseline.overall.mean,
        trained.overall.mean / baseline.overall.mean
    );
    Ok(())
}
