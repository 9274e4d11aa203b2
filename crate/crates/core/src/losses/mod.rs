//! The six training losses, their sampling procedures and the weighted total.
//!
//! [`tensor`] holds the differentiable implementations used in training.
//! The functions at this level take rasters, evaluate the same code in
//! double precision and return plain numbers.

mod sampling;
pub mod tensor;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use sampling::{
    patch_side, sample_contrastive, sample_patches, ContrastiveBatch, FeatureLocation, FeatureSource, PatchSpec,
};

use crate::error::{Error, Result};
use crate::imaging::{angle_between, estimate_illuminant_map, masked_mean, LinearImage, PixelMask, Plane};

/// Stabilizer in the achromatic-loss denominator.
pub const ACHROMATIC_SIGMA: f64 = 1e-4;

/// Weights of the six loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub achromatic: f64,
    pub edge: f64,
    pub l1: f64,
    pub mae: f64,
    pub surf_sim: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            achromatic: 0.1,
            edge: 1.0,
            l1: 1.0,
            mae: 1.0,
            surf_sim: 1.0,
            contrastive: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.achromatic, self.edge, self.l1, self.mae, self.surf_sim, self.contrastive]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Names of the six terms, in weight order.
pub const TERM_NAMES: [&str; 6] = ["achromatic", "edge", "l1", "mae", "surf_sim", "contrastive"];

/// Unweighted values of the six terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub achromatic: f64,
    pub edge: f64,
    pub l1: f64,
    pub mae: f64,
    pub surf_sim: f64,
    pub contrastive: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 6] {
        [self.achromatic, self.edge, self.l1, self.mae, self.surf_sim, self.contrastive]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            achromatic: v[0],
            edge: v[1],
            l1: v[2],
            mae: v[3],
            surf_sim: v[4],
            contrastive: v[5],
        }
    }
}

/// The six terms of one step and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub achromatic: f64,
    pub edge: f64,
    pub l1: f64,
    pub mae: f64,
    pub surf_sim: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            achromatic: self.achromatic,
            edge: self.edge,
            l1: self.l1,
            mae: self.mae,
            surf_sim: self.surf_sim,
            contrastive: self.contrastive,
        }
    }
}

fn check_finite(terms: &[f64; 6]) -> Result<()> {
    for (name, &v) in TERM_NAMES.iter().zip(terms) {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name, value: v });
        }
    }
    Ok(())
}

/// `Σ λᵢ · termᵢ`; fails on the first non-finite term.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    let t = terms.as_array();
    check_finite(&t)?;
    let total = t.iter().zip(weights.as_array()).map(|(v, w)| v * w).sum();
    Ok(LossReport {
        achromatic: t[0],
        edge: t[1],
        l1: t[2],
        mae: t[3],
        surf_sim: t[4],
        contrastive: t[5],
        total,
    })
}

/// Scalar loss tensors, in weight order.
pub struct TensorTerms {
    pub achromatic: Tensor,
    pub edge: Tensor,
    pub l1: Tensor,
    pub mae: Tensor,
    pub surf_sim: Tensor,
    pub contrastive: Tensor,
}

impl TensorTerms {
    fn as_array(&self) -> [&Tensor; 6] {
        [&self.achromatic, &self.edge, &self.l1, &self.mae, &self.surf_sim, &self.contrastive]
    }
}

/// Differentiable weighted total plus the report of term values. Terms with
/// zero weight are reported but left out of the graph.
pub fn weighted_total(terms: &TensorTerms, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    let tensors = terms.as_array();
    let mut values = [0.0; 6];
    for (v, t) in values.iter_mut().zip(tensors) {
        *v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let report = total_loss(&LossTerms::from_array(values), weights)?;
    let mut total: Option<Tensor> = None;
    for (t, w) in tensors.into_iter().zip(weights.as_array()) {
        if w == 0.0 {
            continue;
        }
        let scaled = t.affine(w, 0.0)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => acc.add(&scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => terms.achromatic.zeros_like()?.detach(),
    };
    Ok((total, report))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn image_t(image: &LinearImage) -> Result<Tensor> {
    image.to_tensor(DType::F64, &Device::Cpu)
}

fn check_mask(mask: &PixelMask, dims: (usize, usize), what: &str) -> Result<Tensor> {
    if mask.dims() != dims {
        return Err(Error::Shape(format!("{what}: mask {:?} vs image {dims:?}", mask.dims())));
    }
    mask.to_tensor(DType::F64, &Device::Cpu)
}

/// Achromatic loss of the weighted ground-truth sum.
pub fn achromatic_loss(gt: &LinearImage, weights: &Plane, mask: &PixelMask) -> Result<f64> {
    if weights.dims() != gt.dims() {
        return Err(Error::Shape(format!("weights {:?} vs image {:?}", weights.dims(), gt.dims())));
    }
    let m = check_mask(mask, gt.dims(), "achromatic_loss")?;
    scalar(&tensor::achromatic_loss(&image_t(gt)?, &weights.to_tensor(DType::F64, &Device::Cpu)?, &m)?)
}

/// Mean squared difference of two edge maps.
pub fn edge_loss(pred: &Plane, pseudo: &Plane) -> Result<f64> {
    if pred.dims() != pseudo.dims() {
        return Err(Error::Shape(format!("edge maps {:?} vs {:?}", pred.dims(), pseudo.dims())));
    }
    let t = |p: &Plane| p.to_tensor(DType::F64, &Device::Cpu);
    scalar(&tensor::edge_loss(&t(pred)?, &t(pseudo)?)?)
}

/// Mean absolute difference over included pixels and channels.
pub fn l1_loss(pred: &LinearImage, gt: &LinearImage, mask: &PixelMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("images {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let m = check_mask(mask, gt.dims(), "l1_loss")?;
    scalar(&tensor::l1_loss(&image_t(pred)?, &image_t(gt)?, &m)?)
}

/// Masked mean angular error (degrees) between `input / pred` and
/// `input / gt`. Unlike the tensor form, a zero-norm illuminant at an
/// unmasked pixel is an error here.
pub fn mae_loss(
    input: &LinearImage,
    pred: &LinearImage,
    gt: &LinearImage,
    mask: &PixelMask,
    epsilon: f64,
) -> Result<f64> {
    let est = estimate_illuminant_map(input, pred, epsilon)?;
    let truth = estimate_illuminant_map(input, gt, epsilon)?;
    check_mask(mask, input.dims(), "mae_loss")?;
    let (h, w) = input.dims();
    let mut values = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            if mask.is_included(r, c) {
                values[r * w + c] = angle_between(est.pixel(r, c), truth.pixel(r, c))
                    .ok_or_else(|| Error::Numeric(format!("zero-norm illuminant at pixel ({r}, {c})")))?;
            }
        }
    }
    masked_mean(&Plane::new(h, w, values)?, mask)
}

/// Angles (radians) between each patch pixel and the patch center.
pub fn similarity_map(image: &LinearImage, patch: &PatchSpec) -> Result<Plane> {
    let k = patch.side();
    let s = tensor::similarity_map(&image_t(image)?, patch)?;
    Plane::new(k, k, s.flatten_all()?.to_vec1()?)
}

/// Patch similarity loss between prediction and ground truth.
pub fn patch_similarity_loss(
    pred: &LinearImage,
    gt: &LinearImage,
    patches: &[PatchSpec],
    mask: &PixelMask,
) -> Result<f64> {
    let m = check_mask(mask, gt.dims(), "patch_similarity_loss")?;
    scalar(&tensor::patch_similarity_loss(&image_t(pred)?, &image_t(gt)?, patches, &m)?)
}

/// Decoupled InfoNCE value of a batch.
pub fn contrastive_dce_loss(batch: &ContrastiveBatch) -> Result<f64> {
    scalar(&tensor::contrastive_dce_loss(batch)?)
}
