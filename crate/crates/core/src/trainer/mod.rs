//! Optimization loop: six-loss assembly, Adam, the learning-rate schedule,
//! checkpoints, metrics and deterministic resume.

mod adam;
mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use crate::data::{child_rng, Batch, SampleRecord};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_model;
use crate::imaging::{LinearImage, DEFAULT_EPSILON};
use crate::losses::{self, tensor, LossReport, LossWeights, PatchSpec, TensorTerms};
use crate::model::{ModelConfig, NetworkOutputs, TransCC};

/// Redraws of a patch whose center falls on a masked pixel.
const PATCH_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub decay_start_epoch: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub weights: LossWeights,
    pub tau: f64,
    pub negatives: usize,
    pub anchors: usize,
    pub patches: usize,
    /// Odd patch side; `None` uses a quarter of the shorter side (area 1/16).
    pub patch_side: Option<usize>,
    pub seed: u64,
    /// Epochs between numbered checkpoints.
    pub checkpoint_interval: usize,
    pub adam: AdamConfig,
    pub mae_epsilon: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            initial_lr: 1e-3,
            decay_start_epoch: 100,
            batch_size: 1,
            image_size: 256,
            weights: LossWeights::default(),
            tau: 0.07,
            negatives: 16,
            anchors: 64,
            patches: 2,
            patch_side: None,
            seed: 0,
            checkpoint_interval: 1,
            adam: AdamConfig::default(),
            mae_epsilon: DEFAULT_EPSILON,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs <= self.decay_start_epoch {
            return bad(format!("epochs ({}) must exceed decay_start_epoch ({})", self.epochs, self.decay_start_epoch));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return bad(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if !(self.tau > 0.0) || self.negatives == 0 || self.anchors == 0 || self.patches == 0 {
            return bad("tau, negatives, anchors and patches must be positive".into());
        }
        if let Some(s) = self.patch_side {
            if s % 2 == 0 || s > self.image_size {
                return bad(format!("patch_side {s} must be odd and fit the image"));
            }
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be at least 1".into());
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("bad Adam hyperparameters {a:?}"));
        }
        if !(self.mae_epsilon > 0.0) {
            return bad("mae_epsilon must be positive".into());
        }
        self.weights.validate()
    }

    pub fn patch_side_for(&self, height: usize, width: usize) -> usize {
        self.patch_side.unwrap_or_else(|| losses::patch_side(height, width))
    }
}

/// Constant `initial_lr` before `decay_start_epoch`, then linear decay to 0
/// at `epochs`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch > config.epochs {
        return Err(Error::Argument(format!("epoch {epoch} outside 0..={}", config.epochs)));
    }
    if epoch < config.decay_start_epoch {
        return Ok(config.initial_lr);
    }
    let remaining = (config.epochs - epoch) as f64 / (config.epochs - config.decay_start_epoch) as f64;
    Ok(config.initial_lr * remaining)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        #[serde(flatten)]
        loss: LossReport,
    },
    Epoch {
        epoch: usize,
        step: u64,
        lr: f64,
        #[serde(flatten)]
        loss: LossReport,
        val_mae: Option<f64>,
    },
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.tcck";
pub const BEST_CHECKPOINT: &str = "best.tcck";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.tcck")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Per-epoch outcome handed to observers.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// 1-based number of the epoch just completed.
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the step reports.
    pub train: LossReport,
    pub val_mae: Option<f64>,
    pub steps: Vec<LossReport>,
}

/// Model, optimizer, RNG and counters of a training run.
#[derive(Debug)]
pub struct Trainer {
    model: TransCC,
    config: TrainConfig,
    optimizer: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
    best_val_mae: Option<f64>,
}

/// Mean of each field over a list of reports.
fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        achromatic: sum(|r| r.achromatic),
        edge: sum(|r| r.edge),
        l1: sum(|r| r.l1),
        mae: sum(|r| r.mae),
        surf_sim: sum(|r| r.surf_sim),
        contrastive: sum(|r| r.contrastive),
        total: sum(|r| r.total),
    }
}

impl Trainer {
    /// Fresh run: parameters from `config.seed`, training randomness from an
    /// independent stream of the same seed.
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if model_config.input_size != config.image_size {
            return Err(Error::Config(format!(
                "model input_size {} differs from image_size {}",
                model_config.input_size, config.image_size
            )));
        }
        Ok(Self {
            model: TransCC::new(model_config, config.seed, config.precision.dtype())?,
            config: config.clone(),
            optimizer: Adam::new(config.adam),
            rng: child_rng(config.seed, 1),
            epoch: 0,
            step: 0,
            best_val_mae: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(&ckpt)?;
        ckpt.train_config.validate()?;
        Ok(Self {
            model,
            config: ckpt.train_config,
            optimizer: ckpt.optimizer,
            rng: ckpt.rng,
            epoch: ckpt.epoch,
            step: ckpt.step,
            best_val_mae: ckpt.best_val_mae,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            dtype: self.model.dtype(),
            epoch: self.epoch,
            step: self.step,
            best_val_mae: self.best_val_mae,
            rng: self.rng.clone(),
            params: self.model.params().iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn model(&self) -> &TransCC {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn best_val_mae(&self) -> Option<f64> {
        self.best_val_mae
    }

    /// Draws `n` patches whose centers avoid masked pixels where possible.
    fn draw_patches(&mut self, mask: &crate::imaging::PixelMask) -> Result<Vec<PatchSpec>> {
        let (h, w) = mask.dims();
        let side = self.config.patch_side_for(h, w);
        let mut out = Vec::with_capacity(self.config.patches);
        for _ in 0..self.config.patches {
            let mut p = losses::sample_patches(h, w, 1, side, &mut self.rng)?[0];
            for _ in 0..PATCH_REDRAWS {
                if mask.is_included(p.center_row(), p.center_col()) {
                    break;
                }
                p = losses::sample_patches(h, w, 1, side, &mut self.rng)?[0];
            }
            out.push(p);
        }
        Ok(out)
    }

    /// Forward pass, the six terms and their weighted total for one batch.
    pub fn losses(&mut self, records: &[&SampleRecord]) -> Result<(Tensor, LossReport, NetworkOutputs)> {
        let dtype = self.model.dtype();
        for r in records {
            if r.dims() != (self.config.image_size, self.config.image_size) {
                return Err(Error::Config(format!(
                    "sample {} is {:?}, training expects {}x{}",
                    r.meta.index,
                    r.dims(),
                    self.config.image_size,
                    self.config.image_size
                )));
            }
        }
        let batch = Batch::from_records(records, dtype, self.model.device())?;
        let out = self.model.forward(&batch.input)?;
        let w = self.config.weights;
        let zero = Tensor::zeros((), dtype, self.model.device())?;

        let achromatic = tensor::achromatic_loss(&batch.gt, &out.weight_map, &batch.mask)?;
        let edge = tensor::edge_loss(&out.edge_map, &batch.edge)?;
        let l1 = tensor::l1_loss(&out.wb_image, &batch.gt, &batch.mask)?;
        let mae = tensor::mae_loss(&batch.input, &out.wb_image, &batch.gt, &batch.mask, self.config.mae_epsilon)?;

        let b = records.len();
        let surf_sim = if w.surf_sim != 0.0 {
            let mut per = Vec::with_capacity(b);
            for (i, r) in records.iter().enumerate() {
                let patches = self.draw_patches(&r.mask)?;
                let item = |t: &Tensor| t.narrow(0, i, 1);
                per.push(tensor::patch_similarity_loss(&item(&out.wb_image)?, &item(&batch.gt)?, &patches, &item(&batch.mask)?)?);
            }
            Tensor::stack(&per, 0)?.mean(0)?
        } else {
            zero.clone()
        };

        let contrastive = if w.contrastive != 0.0 {
            let z_o = self.model.encode_to_projection(&out.wb_image)?;
            let z_g = self.model.encode_to_projection(&batch.gt)?.detach();
            let z_i = self.model.encode_to_projection(&batch.input)?.detach();
            let (_, _, zh, zw) = z_o.dims4()?;
            let m = self.config.anchors.min(zh * zw);
            let mut per = Vec::with_capacity(b);
            for i in 0..b {
                let cb = losses::sample_contrastive(
                    &z_i.get(i)?,
                    &z_o.get(i)?,
                    &z_g.get(i)?,
                    m,
                    self.config.negatives,
                    self.config.tau,
                    &mut self.rng,
                )?;
                per.push(tensor::contrastive_dce_loss(&cb)?);
            }
            Tensor::stack(&per, 0)?.mean(0)?
        } else {
            zero.clone()
        };

        let terms = TensorTerms {
            achromatic,
            edge,
            l1,
            mae,
            surf_sim,
            contrastive,
        };
        let (total, report) = losses::weighted_total(&terms, &w)?;
        Ok((total, report, out))
    }

    /// Loss and gradients without touching parameters or counters.
    pub fn gradients(&mut self, records: &[&SampleRecord]) -> Result<(LossReport, GradStore)> {
        let (total, report, _) = self.losses(records)?;
        Ok((report, total.backward()?))
    }

    /// One Adam update at the current epoch's learning rate; returns the
    /// pre-update report.
    pub fn train_step(&mut self, records: &[&SampleRecord]) -> Result<LossReport> {
        let lr = lr_schedule(self.epoch, &self.config)?;
        let (report, grads) = self.gradients(records)?;
        self.optimizer.step(self.model.params(), &grads, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Mean validation MAE of the white-balanced output.
    pub fn validate(&self, val: &[SampleRecord]) -> Result<f64> {
        let report = evaluate_model(&self.model, val)?;
        if let Some((id, msg)) = report.failures.first() {
            return Err(Error::Numeric(format!("validation failed on sample {id}: {msg}")));
        }
        Ok(report.overall.mean)
    }

    /// Trains until `until_epoch` epochs are complete (clamped to the
    /// configured count). With `out_dir`, appends to the metrics log and
    /// writes checkpoints after each epoch.
    pub fn run(
        &mut self,
        train: &[SampleRecord],
        val: &[SampleRecord],
        out_dir: Option<&Path>,
        until_epoch: usize,
        on_epoch: &mut dyn FnMut(&EpochSummary),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Argument("training split is empty".into()));
        }
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(dir)?),
            None => None,
        };
        let until = until_epoch.min(self.config.epochs);
        while self.epoch < until {
            let lr = lr_schedule(self.epoch, &self.config)?;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.rng);
            let mut steps = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &train[i]).collect();
                let report = self.train_step(&batch)?;
                if let Some(log) = log.as_mut() {
                    log.write(&MetricRecord::Step {
                        step: self.step,
                        epoch: self.epoch + 1,
                        lr,
                        loss: report,
                    })?;
                }
                steps.push(report);
            }
            self.epoch += 1;
            let val_mae = if val.is_empty() { None } else { Some(self.validate(val)?) };
            let improved = match (val_mae, self.best_val_mae) {
                (Some(v), Some(best)) => v < best,
                (Some(_), None) => true,
                _ => false,
            };
            if improved {
                self.best_val_mae = val_mae;
            }
            let summary = EpochSummary {
                epoch: self.epoch,
                lr,
                train: mean_report(&steps),
                val_mae,
                steps,
            };
            if let Some(log) = log.as_mut() {
                log.write(&MetricRecord::Epoch {
                    epoch: self.epoch,
                    step: self.step,
                    lr,
                    loss: summary.train,
                    val_mae,
                })?;
                log.flush()?;
            }
            if let Some(dir) = out_dir {
                let ckpt = self.checkpoint();
                if self.epoch.is_multiple_of(self.config.checkpoint_interval) || self.epoch == self.config.epochs {
                    ckpt.save(&dir.join(epoch_checkpoint_name(self.epoch)))?;
                }
                if improved {
                    ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                }
                ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
            }
            on_epoch(&summary);
        }
        Ok(())
    }

    /// Trains for every remaining configured epoch.
    pub fn fit(
        &mut self,
        train: &[SampleRecord],
        val: &[SampleRecord],
        out_dir: Option<&Path>,
        on_epoch: &mut dyn FnMut(&EpochSummary),
    ) -> Result<()> {
        self.run(train, val, out_dir, self.config.epochs, on_epoch)
    }
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::format(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Rebuilds the network stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<TransCC> {
    let model = TransCC::new(&ckpt.model_config, 0, ckpt.dtype)?;
    let store = model.params();
    if store.len() != ckpt.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, the configured model {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, t) in &ckpt.params {
        store.assign(name, t).map_err(|e| Error::Config(format!("checkpoint does not match the model: {e}")))?;
    }
    Ok(model)
}

/// Evaluation-mode forward on one image.
pub fn infer(model: &TransCC, image: &LinearImage) -> Result<NetworkOutputs> {
    model.infer_image(image)
}
