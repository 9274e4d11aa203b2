//! Acceptance suite: runs the ten criteria in order and prints one PASS/FAIL
//! line for each. Exits non-zero when any criterion fails.
//!
//! Criteria 8 and 9 train two desk-scale networks and dominate the runtime.
//! Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 1 2 10`.

mod oracles;

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transcc::cli::report::{epoch_points, error_summary, plot_error_histogram, plot_training_curves, training_summary};
use transcc::cli::RunConfig;
use transcc::data::{generate_dataset, generate_record, sample_id, GenConfig, SampleRecord, Split};
use transcc::evaluation::{aggregate, evaluate_identity, evaluate_model, format_summary, EvalReport};
use transcc::imaging::{
    angle_between, angular_error_map, estimate_illuminant_map, white_balance, IlluminantMap, LinearImage, PixelMask,
    Plane, DEFAULT_EPSILON,
};
use transcc::losses::{self, tensor, ContrastiveBatch, PatchSpec, ACHROMATIC_SIGMA};
use transcc::model::ModelConfig;
use transcc::trainer::{lr_schedule, read_metrics, Checkpoint, TrainConfig, Trainer, LATEST_CHECKPOINT, METRICS_FILE};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn image_t(img: &LinearImage) -> Tensor {
    img.to_tensor(DType::F64, &Device::Cpu).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LinearImage {
    LinearImage::from_fn(h, w, |_, _| std::array::from_fn(|_| rng.random_range(0.02..1.0))).unwrap()
}

fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PixelMask {
    let mut v: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
    v[rng.random_range(0..h * w)] = true;
    PixelMask::new(h, w, v).unwrap()
}

fn patches_with_live_center(rng: &mut ChaCha8Rng, mask: &PixelMask, side: usize) -> Vec<PatchSpec> {
    let (h, w) = mask.dims();
    loop {
        let p = losses::sample_patches(h, w, 2, side, rng).unwrap();
        if p.iter().any(|p| mask.is_included(p.center_row(), p.center_col())) {
            return p;
        }
    }
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Criterion 1: Every loss, raster and tensor form, against the naive loops.
fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 6];
    let cpu = Device::Cpu;
    for _ in 0..100 {
        let (input, pred, gt) = (random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8));
        let mask = random_mask(&mut rng, 8, 8);
        let weights = random_plane(&mut rng, 8, 8);
        let (edge_pred, edge_pseudo) = (random_plane(&mut rng, 8, 8), random_plane(&mut rng, 8, 8));
        let patches = patches_with_live_center(&mut rng, &mask, 3);
        let tm = mask.to_tensor(DType::F64, &cpu).unwrap();
        let plane_t = |p: &Plane| p.to_tensor(DType::F64, &cpu).unwrap();

        let expect = oracles::achromatic(&gt, &weights, &mask);
        let got = [
            ok(losses::achromatic_loss(&gt, &weights, &mask))?,
            scalar(&ok(tensor::achromatic_loss(&image_t(&gt), &plane_t(&weights), &tm))?),
        ];
        worst[0] = got.iter().fold(worst[0], |m, v| m.max(rel(*v, expect)));

        let expect = oracles::edge(&edge_pred, &edge_pseudo);
        let got = [
            ok(losses::edge_loss(&edge_pred, &edge_pseudo))?,
            scalar(&ok(tensor::edge_loss(&plane_t(&edge_pred), &plane_t(&edge_pseudo)))?),
        ];
        worst[1] = got.iter().fold(worst[1], |m, v| m.max(rel(*v, expect)));

        let expect = oracles::l1(&pred, &gt, &mask);
        let got = [
            ok(losses::l1_loss(&pred, &gt, &mask))?,
            scalar(&ok(tensor::l1_loss(&image_t(&pred), &image_t(&gt), &tm))?),
        ];
        worst[2] = got.iter().fold(worst[2], |m, v| m.max(rel(*v, expect)));

        let eps = DEFAULT_EPSILON;
        let expect = oracles::mae(&input, &pred, &gt, &mask, eps);
        let got = [
            ok(losses::mae_loss(&input, &pred, &gt, &mask, eps))?,
            scalar(&ok(tensor::mae_loss(&image_t(&input), &image_t(&pred), &image_t(&gt), &tm, eps))?),
        ];
        worst[3] = got.iter().fold(worst[3], |m, v| m.max(rel(*v, expect)));

        let expect = oracles::patch_similarity(&pred, &gt, &patches, &mask);
        let got = [
            ok(losses::patch_similarity_loss(&pred, &gt, &patches, &mask))?,
            scalar(&ok(tensor::patch_similarity_loss(&image_t(&pred), &image_t(&gt), &patches, &tm))?),
        ];
        worst[4] = got.iter().fold(worst[4], |m, v| m.max(rel(*v, expect)));

        // sampled from raw feature maps; the oracle rebuilds vectors from the recorded locations
        let (c, side) = (6, 4);
        let map = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..c * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(v, (c, side, side), &cpu).unwrap()
        };
        let (zi, zo, zg) = (map(&mut rng), map(&mut rng), map(&mut rng));
        let batch = ok(losses::sample_contrastive(&zi, &zo, &zg, 8, 16, 0.07, &mut rng))?;
        let token = |z: &Tensor, i: usize| -> Vec<f64> { (0..c).map(|k| z.get(k).unwrap().flatten_all().unwrap().get(i).unwrap().to_scalar::<f64>().unwrap()).collect() };
        let anchors: Vec<Vec<f64>> = batch.anchor_locations.iter().map(|&a| token(&zo, a)).collect();
        let positives: Vec<Vec<Vec<f64>>> = batch.anchor_locations.iter().map(|&a| vec![token(&zi, a), token(&zg, a)]).collect();
        let negatives: Vec<Vec<Vec<f64>>> = batch
            .negative_locations
            .iter()
            .map(|locs| {
                locs.iter()
                    .map(|l| match l.source {
                        losses::FeatureSource::Input => token(&zi, l.index),
                        losses::FeatureSource::Target => token(&zg, l.index),
                    })
                    .collect()
            })
            .collect();
        let expect = oracles::dce(&anchors, &positives, &negatives, 0.07);
        let got = [ok(losses::contrastive_dce_loss(&batch))?, scalar(&ok(tensor::contrastive_dce_loss(&batch))?)];
        worst[5] = got.iter().fold(worst[5], |m, v| m.max(rel(*v, expect)));
    }
    let names = ["achromatic", "edge", "l1", "mae", "surf_sim", "contrastive"];
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    ensure!(worst.iter().all(|w| *w < 1e-6), "max relative error over 100 inputs: {detail}");
    Ok(format!("max relative error over 100 inputs: {detail}"))
}

/// ‖analytic − central difference‖ / max of the two norms.
fn gradient_error(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let h = 1e-5;
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let at = |i: usize, d: f64| {
        let mut v = base.clone();
        v[i] += d;
        scalar(&f(&Tensor::from_vec(v, x.shape(), &Device::Cpu).unwrap()))
    };
    let numeric: Vec<f64> = (0..base.len()).map(|i| (at(i, h) - at(i, -h)) / (2.0 * h)).collect();
    let l2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    l2(&diff) / l2(&analytic).max(l2(&numeric)).max(1e-12)
}

/// Criterion 2: Gradients of all six losses against central differences, f64, 4×4.
fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cpu = Device::Cpu;
    let (input, pred, gt) = (random_image(&mut rng, 4, 4), random_image(&mut rng, 4, 4), random_image(&mut rng, 4, 4));
    let (ti, tp, tg) = (image_t(&input), image_t(&pred), image_t(&gt));
    let mask = random_mask(&mut rng, 4, 4);
    let tm = mask.to_tensor(DType::F64, &cpu).unwrap();
    let weights = Plane::from_fn(4, 4, |_, _| rng.random_range(0.1..0.9)).to_tensor(DType::F64, &cpu).unwrap();
    let edges = random_plane(&mut rng, 4, 4).to_tensor(DType::F64, &cpu).unwrap();
    let pseudo = random_plane(&mut rng, 4, 4).to_tensor(DType::F64, &cpu).unwrap();
    let patches = patches_with_live_center(&mut rng, &mask, 3);
    let (m, n, c) = (3, 16, 5);
    let a = unit_vectors(&mut rng, m, c);
    let p: Vec<[Vec<f64>; 2]> = (0..m).map(|_| { let v = unit_vectors(&mut rng, 2, c); [v[0].clone(), v[1].clone()] }).collect();
    let q: Vec<Vec<Vec<f64>>> = (0..m).map(|_| unit_vectors(&mut rng, n, c)).collect();
    let batch = ok(ContrastiveBatch::from_vectors(&a, &p, &q, 0.07, DType::F64))?;

    let checks: Vec<(&str, f64)> = vec![
        ("achromatic", gradient_error(&weights, &|w| tensor::achromatic_loss(&tg, w, &tm).unwrap())),
        ("edge", gradient_error(&edges, &|e| tensor::edge_loss(e, &pseudo).unwrap())),
        ("l1", gradient_error(&tp, &|x| tensor::l1_loss(x, &tg, &tm).unwrap())),
        ("mae", gradient_error(&tp, &|x| tensor::mae_loss(&ti, x, &tg, &tm, DEFAULT_EPSILON).unwrap())),
        ("surf_sim", gradient_error(&tp, &|x| tensor::patch_similarity_loss(x, &tg, &patches, &tm).unwrap())),
        (
            "contrastive/anchors",
            gradient_error(&batch.anchors, &|x| tensor::contrastive_dce_loss(&ContrastiveBatch { anchors: x.clone(), ..batch.clone() }).unwrap()),
        ),
        (
            "contrastive/positives",
            gradient_error(&batch.positives, &|x| tensor::contrastive_dce_loss(&ContrastiveBatch { positives: x.clone(), ..batch.clone() }).unwrap()),
        ),
        (
            "contrastive/negatives",
            gradient_error(&batch.negatives, &|x| tensor::contrastive_dce_loss(&ContrastiveBatch { negatives: x.clone(), ..batch.clone() }).unwrap()),
        ),
    ];
    let detail = checks.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure!(checks.iter().all(|(_, e)| *e < 1e-4), "relative gradient error: {detail}");
    Ok(format!("relative gradient error: {detail}"))
}

/// Criterion 3: Hand-substituted values of the achromatic and contrastive losses.
fn analytic_values() -> Outcome {
    let mask = PixelMask::all(4, 4);
    let mut one_weight = vec![0.0; 16];
    one_weight[5] = 1.0;
    let weights = Plane::new(4, 4, one_weight).unwrap();
    let gray = LinearImage::filled(4, 4, [0.4, 0.4, 0.4]).unwrap();
    let red = LinearImage::filled(4, 4, [0.7, 0.0, 0.0]).unwrap();
    let achro = ok(losses::achromatic_loss(&gray, &weights, &mask))?;
    let red_v = ok(losses::achromatic_loss(&red, &weights, &mask))?;
    let closed = ACHROMATIC_SIGMA / (ACHROMATIC_SIGMA + 3f64.sqrt());
    ensure!((achro - 5.7732e-5).abs() < 1e-8 && (achro - closed).abs() < 1e-12, "achromatic case {achro:.10e}");
    ensure!((red_v - 0.42268).abs() < 1e-5, "pure-red case {red_v:.8}");

    let tau = 0.07;
    let e = |i: usize| {
        let mut v = vec![0.0; 18];
        v[i] = 1.0;
        v
    };
    let anchor = e(0);
    let negatives: Vec<Vec<f64>> = (1..17).map(e).collect();
    let batch = ok(ContrastiveBatch::from_vectors(&[anchor.clone()], &[[anchor.clone(), anchor]], &[negatives], tau, DType::F64))?;
    let dce = ok(losses::contrastive_dce_loss(&batch))?;
    let dce_t = scalar(&ok(tensor::contrastive_dce_loss(&batch))?);
    ensure!((dce + 12.2062).abs() < 1e-3 && (dce_t - dce).abs() < 1e-9, "DCE closed form {dce:.6} (tensor {dce_t:.6})");
    Ok(format!("achromatic {achro:.5e}, pure red {red_v:.5}, DCE {dce:.4}"))
}

/// Criterion 4: The reference angle and positive-scaling invariance.
fn angular_machinery() -> Outcome {
    let deg = angle_between([1.0, 2.0, 1.0], [1.0, 1.0, 1.0]).ok_or("zero vector")?;
    ensure!((deg - 19.4712).abs() < 1e-3, "angle {deg}");
    let one = |rgb: [f64; 3]| IlluminantMap::new(1, 1, rgb.to_vec()).unwrap();
    let map_deg = ok(angular_error_map(&one([1.0, 2.0, 1.0]), &one([1.0, 1.0, 1.0])))?.get(0, 0);
    ensure!((map_deg - deg).abs() < 1e-12, "angular_error_map gives {map_deg}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_map = 0.0f64;
    let mut worst_patch = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (12, 12);
        let rand_map = |rng: &mut ChaCha8Rng| IlluminantMap::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
        let (a, b) = (rand_map(&mut rng), rand_map(&mut rng));
        let scales: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.01..100.0)).collect();
        let scale = |m: &[f64]| m.iter().enumerate().map(|(i, v)| v * scales[i / 3]).collect::<Vec<f64>>();
        let a2 = IlluminantMap::new(h, w, scale(a.as_slice())).unwrap();
        let before = ok(angular_error_map(&a, &b))?;
        let after = ok(angular_error_map(&a2, &b))?;
        for (x, y) in before.as_slice().iter().zip(after.as_slice()) {
            worst_map = worst_map.max((x - y).abs());
        }

        let (pred, gt) = (random_image(&mut rng, h, w), random_image(&mut rng, h, w));
        let pred2 = LinearImage::new(h, w, scale(pred.as_slice())).unwrap();
        let mask = random_mask(&mut rng, h, w);
        let patches = patches_with_live_center(&mut rng, &mask, 5);
        let tm = mask.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let raster = |p: &LinearImage| losses::patch_similarity_loss(p, &gt, &patches, &mask).unwrap();
        let tens = |p: &LinearImage| scalar(&tensor::patch_similarity_loss(&image_t(p), &image_t(&gt), &patches, &tm).unwrap());
        worst_patch = worst_patch.max((raster(&pred) - raster(&pred2)).abs()).max((tens(&pred) - tens(&pred2)).abs());
    }
    ensure!(worst_map < 1e-9 && worst_patch < 1e-9, "scaling changed results: map {worst_map:.1e}, patches {worst_patch:.1e}");
    Ok(format!("angle {deg:.4} deg; scaling drift: map {worst_map:.1e}, patches {worst_patch:.1e}"))
}

/// Criterion 5: white_balance(input, illum) = gt and the recovered illuminant, on 100
/// generated samples.
fn image_formation() -> Outcome {
    let config = GenConfig::default();
    let (mut max_abs, mut max_deg) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let r = ok(generate_record(&config, 5, i))?;
        let balanced = ok(white_balance(&r.input, &r.illum, DEFAULT_EPSILON))?;
        let recovered = ok(estimate_illuminant_map(&r.input, &r.gt, DEFAULT_EPSILON))?;
        let (h, w) = r.dims();
        for row in 0..h {
            for col in 0..w {
                if !r.mask.is_included(row, col) {
                    continue;
                }
                let (b, g) = (balanced.pixel(row, col), r.gt.pixel(row, col));
                for k in 0..3 {
                    max_abs = max_abs.max((b[k] - g[k]).abs());
                }
                let deg = angle_between(recovered.pixel(row, col), r.illum.pixel(row, col)).ok_or("zero pixel")?;
                max_deg = max_deg.max(deg);
            }
        }
    }
    ensure!(max_abs < 1e-6 && max_deg < 0.01, "max abs error {max_abs:.2e}, max angle {max_deg:.2e} deg");
    Ok(format!("100 samples: max abs error {max_abs:.2e}, max illuminant angle {max_deg:.2e} deg"))
}

/// Criterion 6: The learning-rate schedule at its anchor epochs.
fn schedule() -> Outcome {
    let c = TrainConfig::default();
    let got: Vec<f64> = [0, 100, 150, 200].iter().map(|&e| lr_schedule(e, &c).unwrap()).collect();
    ensure!(got == [1e-3, 1e-3, 5e-4, 0.0], "lr(0, 100, 150, 200) = {got:?}");
    Ok(format!("lr(0, 100, 150, 200) = {got:?}"))
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        base_channels: 8,
        stage_channels: [8, 8, 16, 16],
        attention_heads: 2,
        middle_blocks: 1,
        projection_dim: 16,
        width_multiplier: 1.0,
        norm_groups: 4,
    }
}

fn step_losses(t: &mut Trainer, train: &[SampleRecord], val: &[SampleRecord], until: usize, dir: Option<&Path>) -> Vec<f64> {
    let mut out = Vec::new();
    t.run(train, val, dir, until, &mut |s| out.extend(s.steps.iter().map(|r| r.total))).unwrap();
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Criterion 7: Two identical runs, and a run interrupted at epoch 1 and resumed from
/// its checkpoint file.
fn determinism_and_resume() -> Outcome {
    let data = GenConfig { height: 32, width: 32, ..GenConfig::default() };
    let (records, _) = ok(generate_dataset(&data, 6, 7, 2))?;
    let (train, val) = records.split_at(4);
    let config = TrainConfig { epochs: 3, decay_start_epoch: 1, image_size: 32, anchors: 4, negatives: 4, seed: 7, ..TrainConfig::default() };

    let mut a = ok(Trainer::new(&toy_model(), &config))?;
    let run_a = step_losses(&mut a, train, val, 3, None);
    let mut b = ok(Trainer::new(&toy_model(), &config))?;
    let run_b = step_losses(&mut b, train, val, 3, None);
    ensure!(run_a.len() == 12 && run_b.len() == 12, "expected 12 steps, got {} and {}", run_a.len(), run_b.len());
    let same = max_diff(&run_a, &run_b);
    ensure!(same <= 1e-6, "repeat run drifts by {same:.1e}");

    let dir = ok(tempfile::tempdir())?;
    let mut c = ok(Trainer::new(&toy_model(), &config))?;
    let head = step_losses(&mut c, train, val, 1, Some(dir.path()));
    drop(c);
    let mut resumed = ok(Trainer::from_checkpoint(ok(Checkpoint::load(&dir.path().join(LATEST_CHECKPOINT)))?))?;
    let tail = step_losses(&mut resumed, train, val, 3, Some(dir.path()));
    let resume_diff = max_diff(&[head, tail.clone()].concat(), &run_a);
    ensure!(tail.len() == 8 && resume_diff <= 1e-6, "resumed run drifts by {resume_diff:.1e} over {} steps", tail.len());
    Ok(format!("12 steps, repeat drift {same:.1e}, resume-from-epoch-1 drift {resume_diff:.1e}"))
}

struct DeskRun {
    label: String,
    dir: tempfile::TempDir,
    report: EvalReport,
}

struct DeskData {
    config: RunConfig,
    train: Vec<SampleRecord>,
    val: Vec<SampleRecord>,
    baseline: EvalReport,
}

fn desk_data() -> Result<DeskData, String> {
    let config = RunConfig::desk();
    let (records, manifest) = ok(generate_dataset(&config.data, config.count, config.seed, config.effective_threads()))?;
    let pick = |split: Split| -> Vec<SampleRecord> {
        let ids = manifest.splits.get(split);
        records.iter().filter(|r| ids.contains(&sample_id(r.meta.index))).cloned().collect()
    };
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    ensure!(train.len() == 300 && val.len() == 50, "split sizes {} / {}", train.len(), val.len());
    let baseline = ok(evaluate_identity(&val))?;
    Ok(DeskData { config, train, val, baseline })
}

fn desk_train(data: &DeskData, label: &str, train: TrainConfig) -> Result<DeskRun, String> {
    let dir = ok(tempfile::tempdir())?;
    let started = Instant::now();
    let mut trainer = ok(Trainer::new(&data.config.model, &train))?;
    ok(trainer.fit(&data.train, &data.val, Some(dir.path()), &mut |s| {
        if s.epoch % 5 == 0 {
            println!(
                "    [{label}] epoch {:>2}: loss {:.4}, val MAE {:.3} ({:.0}s)",
                s.epoch,
                s.train.total,
                s.val_mae.unwrap_or(f64::NAN),
                started.elapsed().as_secs_f64()
            );
        }
    }))?;
    let report = ok(evaluate_model(trainer.model(), &data.val))?;
    Ok(DeskRun { label: label.to_string(), dir, report })
}

/// Criterion 8: Desk-scale training beats half the identity baseline overall and the
/// baseline within every light count.
fn desk_learning(data: &DeskData, full: &RefCell<Option<DeskRun>>) -> Outcome {
    let run = desk_train(data, "full", data.config.train.clone())?;
    let base = &data.baseline;
    println!("    identity baseline (val):\n{}", indent(&format_summary(base)));
    println!("    trained model (val):\n{}", indent(&format_summary(&run.report)));
    let ratio = run.report.overall.mean / base.overall.mean;
    let mut problems = Vec::new();
    if !(ratio < 0.5) {
        problems.push(format!("mean ratio {ratio:.3} is not below 0.5"));
    }
    if !run.report.failures.is_empty() {
        problems.push(format!("{} images failed", run.report.failures.len()));
    }
    for k in 1..=3 {
        match (run.report.per_light.get(&k), base.per_light.get(&k)) {
            (Some(t), Some(b)) if t.mean < b.mean => {}
            (Some(t), Some(b)) => problems.push(format!("K={k}: {:.3} not below identity {:.3}", t.mean, b.mean)),
            _ => problems.push(format!("K={k} row missing")),
        }
    }
    let detail = format!(
        "val mean {:.3} vs identity {:.3} (ratio {ratio:.3}); K rows {}",
        run.report.overall.mean,
        base.overall.mean,
        (1..=3)
            .map(|k| {
                let t = run.report.per_light.get(&k).map_or(f64::NAN, |s| s.mean);
                let b = base.per_light.get(&k).map_or(f64::NAN, |s| s.mean);
                format!("{k}: {t:.2}/{b:.2}")
            })
            .collect::<Vec<_>>()
            .join(", ")
    );
    *full.borrow_mut() = Some(run);
    ensure!(problems.is_empty(), "{detail}; {}", problems.join("; "));
    Ok(detail)
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("      {l}")).collect::<Vec<_>>().join("\n")
}

/// Criterion 9: The same setup without the patch-similarity and contrastive terms,
/// compared with the full run in a report.
fn ablation(data: &DeskData, full: &RefCell<Option<DeskRun>>) -> Outcome {
    let full = full.borrow();
    let full = full.as_ref().ok_or("full run unavailable (criterion 8 did not finish training)")?;
    let mut weights = data.config.train.weights;
    weights.surf_sim = 0.0;
    weights.contrastive = 0.0;
    let ablated = desk_train(data, "no surf_sim/contrastive", TrainConfig { weights, ..data.config.train.clone() })?;

    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report");
    ok(std::fs::create_dir_all(&out))?;
    let mut curves = Vec::new();
    let mut tables = Vec::new();
    for run in [full, &ablated] {
        let log = ok(read_metrics(&run.dir.path().join(METRICS_FILE)))?;
        let points = epoch_points(&log);
        ensure!(points.len() == data.config.train.epochs, "{}: {} epochs logged", run.label, points.len());
        ensure!(points.iter().all(|p| p.val_mae.is_some_and(f64::is_finite)), "{}: missing validation", run.label);
        ensure!(run.report.failures.is_empty(), "{}: failed images", run.label);
        curves.push((run.label.clone(), points));
        tables.push((run.label.clone(), run.report.images.clone()));
    }
    tables.push(("identity".to_string(), data.baseline.images.clone()));
    ok(plot_training_curves(&out.join("training_curve.svg"), &curves))?;
    ok(plot_error_histogram(&out.join("error_histogram.svg"), &tables, 30))?;
    let summary = format!("{}\n{}", training_summary(&curves), ok(error_summary(&tables))?);
    ok(std::fs::write(out.join("summary.txt"), &summary))?;
    println!("{}", indent(&summary));
    for f in ["training_curve.svg", "error_histogram.svg"] {
        ensure!(out.join(f).metadata().map(|m| m.len() > 0).unwrap_or(false), "{f} missing");
    }
    Ok(format!(
        "full {:.3} vs ablated {:.3} val mean MAE (directional only), report in {}",
        full.report.overall.mean,
        ablated.report.overall.mean,
        out.display()
    ))
}

/// Criterion 10: aggregate against sorting and slicing on 1000 random lists.
fn statistics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
        let s = ok(aggregate(&errors))?;
        let got = [s.mean, s.median, s.trimean, s.q1, s.q3, s.best25, s.worst25];
        let expect = oracles::stats(&errors);
        ensure!(s.count == n, "count {} for {n} errors", s.count);
        worst = got.iter().zip(expect).fold(worst, |m, (g, e)| m.max((g - e).abs()));
    }
    ensure!(worst <= 1e-12, "max deviation {worst:.1e}");
    Ok(format!("1000 lists, max deviation {worst:.1e}"))
}

fn main() {
    // panics are reported on the criterion's line
    std::panic::set_hook(Box::new(|_| {}));
    let full_run = RefCell::new(None);
    let desk = RefCell::new(None::<Result<DeskData, String>>);
    let with_desk = |f: &dyn Fn(&DeskData) -> Outcome| -> Outcome {
        let mut slot = desk.borrow_mut();
        let data = slot.get_or_insert_with(desk_data);
        match data {
            Ok(d) => f(d),
            Err(e) => Err(format!("dataset: {e}")),
        }
    };

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("loss oracles", Box::new(loss_oracles)),
        ("gradient checks", Box::new(gradient_checks)),
        ("analytic loss values", Box::new(analytic_values)),
        ("angular machinery", Box::new(angular_machinery)),
        ("image formation round trip", Box::new(image_formation)),
        ("learning-rate schedule", Box::new(schedule)),
        ("determinism and resume", Box::new(determinism_and_resume)),
        ("desk-scale learning signal", Box::new(|| with_desk(&|d| desk_learning(d, &full_run)))),
        ("ablation report", Box::new(|| with_desk(&|d| ablation(d, &full_run)))),
        ("statistics oracle", Box::new(statistics_oracle)),
    ];

    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut passed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            println!("SKIP criterion {:>2} {name}", i + 1);
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS criterion {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
