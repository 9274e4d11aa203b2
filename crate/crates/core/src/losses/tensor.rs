//! Differentiable loss terms on `candle` tensors. Images are `(B, 3, H, W)`,
//! single-channel maps and masks `(B, 1, H, W)`; batched terms are averaged
//! over the batch items.

use candle_core::{DType, Tensor, D};

use super::sampling::{ContrastiveBatch, PatchSpec};
use super::ACHROMATIC_SIGMA;
use crate::error::{Error, Result};
use crate::kernels;

/// Floor on squared norms so that normalizations stay finite (and their
/// gradients defined) for zero vectors.
const SQ_NORM_FLOOR: f64 = 1e-24;

/// Norms below this make the achromatic loss fall back to its maximum.
const DEGENERATE_NORM: f64 = 1e-12;

fn check_dims(t: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    if t.dims() != expected {
        return Err(Error::Shape(format!("{what}: expected {expected:?}, got {:?}", t.dims())));
    }
    Ok(())
}

fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.dims() {
        &[b, 3, h, w] => Ok((b, h, w)),
        d => Err(Error::Shape(format!("{what}: expected (B, 3, H, W), got {d:?}"))),
    }
}

/// Per-item mean of `values` `(B, 1, H, W)` over the included pixels of `mask`.
fn masked_item_means(values: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let b = values.dim(0)?;
    let counts = mask.flatten_from(1)?.sum(1)?;
    let host: Vec<f64> = counts.to_dtype(DType::F64)?.to_vec1()?;
    if let Some(i) = host.iter().position(|&c| c <= 0.0) {
        return Err(Error::Argument(format!("mask of batch item {i} includes no pixels")));
    }
    let sums = values.broadcast_mul(mask)?.flatten_from(1)?.sum(1)?;
    debug_assert_eq!(sums.dims(), &[b]);
    Ok(sums.div(&counts)?)
}

/// `‖v‖` along `dim`, kept, with the squared norm floored.
fn safe_norm(v: &Tensor, dim: usize) -> Result<Tensor> {
    Ok(v.sqr()?.sum_keepdim(dim)?.maximum(SQ_NORM_FLOOR)?.sqrt()?)
}

/// Angle in radians between RGB vectors along dim 1 of two `(B, 3, H, W)`
/// tensors; pixels where either vector is zero get the angle between the
/// floored normalizations (90° against a nonzero vector).
fn pixel_angles(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (a, b) = (a.broadcast_div(&safe_norm(a, 1)?)?, b.broadcast_div(&safe_norm(b, 1)?)?);
    let ch = |t: &Tensor, i: usize| t.narrow(1, i, 1);
    let (a0, a1, a2) = (ch(&a, 0)?, ch(&a, 1)?, ch(&a, 2)?);
    let (b0, b1, b2) = (ch(&b, 0)?, ch(&b, 1)?, ch(&b, 2)?);
    let cross = Tensor::cat(
        &[
            (a1.mul(&b2)? - a2.mul(&b1)?)?,
            (a2.mul(&b0)? - a0.mul(&b2)?)?,
            (a0.mul(&b1)? - a1.mul(&b0)?)?,
        ],
        1,
    )?;
    let sin = cross.sqr()?.sum_keepdim(1)?.maximum(SQ_NORM_FLOOR)?.sqrt()?;
    let cos = a.mul(&b)?.sum_keepdim(1)?;
    Ok(kernels::atan2(&sin, &cos)?)
}

/// Achromatic-pixel loss on the weighted ground-truth sum, one value per
/// batch item averaged over the batch.
pub fn achromatic_loss(gt: &Tensor, weights: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, h, w) = image_dims(gt, "achromatic_loss gt")?;
    check_dims(weights, &[b, 1, h, w], "achromatic_loss weights")?;
    check_dims(mask, &[b, 1, h, w], "achromatic_loss mask")?;
    let lo = weights.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let hi = weights.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::Argument(format!("achromatic weights must lie in [0, 1], got [{lo}, {hi}]")));
    }
    let u = gt.broadcast_mul(&weights.mul(mask)?)?.sum((2, 3))?;
    let sq = u.sqr()?.sum_keepdim(1)?;
    let c = u.broadcast_div(&sq.maximum(SQ_NORM_FLOOR)?.sqrt()?)?;
    let num = c.sum(1)?;
    let den = (c.sqr()?.sum(1)? * 3.0)?.sqrt()?.affine(1.0, ACHROMATIC_SIGMA)?;
    let loss = num.div(&den)?.affine(-1.0, 1.0)?;
    let degenerate = sq.squeeze(1)?.lt(DEGENERATE_NORM * DEGENERATE_NORM)?;
    let loss = degenerate.where_cond(&loss.ones_like()?, &loss)?;
    Ok(loss.mean(0)?)
}

/// Mean squared error between predicted and pseudo-label edge maps.
pub fn edge_loss(pred: &Tensor, pseudo: &Tensor) -> Result<Tensor> {
    if pred.dims() != pseudo.dims() {
        return Err(Error::Shape(format!("edge_loss: {:?} vs {:?}", pred.dims(), pseudo.dims())));
    }
    Ok(pred.sub(pseudo)?.sqr()?.mean_all()?)
}

/// Mean absolute error over included pixels and all channels.
pub fn l1_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, h, w) = image_dims(pred, "l1_loss pred")?;
    check_dims(gt, pred.dims(), "l1_loss gt")?;
    check_dims(mask, &[b, 1, h, w], "l1_loss mask")?;
    let per_pixel = (pred.sub(gt)?.abs()?.sum_keepdim(1)? / 3.0)?;
    Ok(masked_item_means(&per_pixel, mask)?.mean(0)?)
}

/// Mean angular error in degrees between the illuminant maps implied by the
/// prediction and by the ground truth (`input / max(image, epsilon)`).
pub fn mae_loss(input: &Tensor, pred: &Tensor, gt: &Tensor, mask: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (b, h, w) = image_dims(input, "mae_loss input")?;
    check_dims(pred, input.dims(), "mae_loss pred")?;
    check_dims(gt, input.dims(), "mae_loss gt")?;
    check_dims(mask, &[b, 1, h, w], "mae_loss mask")?;
    if !(epsilon > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    let est = input.div(&pred.maximum(epsilon)?)?;
    let truth = input.div(&gt.maximum(epsilon)?)?;
    let degrees = (pixel_angles(&est, &truth)? * (180.0 / std::f64::consts::PI))?;
    Ok(masked_item_means(&degrees, mask)?.mean(0)?)
}

fn single_image(t: &Tensor, what: &str) -> Result<Tensor> {
    match t.dims() {
        &[3, _, _] => Ok(t.unsqueeze(0)?),
        &[1, 3, _, _] => Ok(t.clone()),
        d => Err(Error::Shape(format!("{what}: expected one (3, H, W) image, got {d:?}"))),
    }
}

/// `(k, k)` map of angles (radians) between each patch pixel and the patch
/// center; zero-norm pixels map to 0.
pub fn similarity_map(image: &Tensor, patch: &PatchSpec) -> Result<Tensor> {
    let image = single_image(image, "similarity_map")?;
    let (_, _, h, w) = image.dims4()?;
    patch.check_inside(h, w)?;
    let (top, left, k) = (patch.top(), patch.left(), patch.side());
    let window = image.narrow(2, top, k)?.narrow(3, left, k)?;
    let anchor = image.narrow(2, patch.center_row(), 1)?.narrow(3, patch.center_col(), 1)?;
    let anchor_sq = anchor.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if anchor_sq == 0.0 {
        return Err(Error::Numeric(format!(
            "zero-norm anchor at pixel ({}, {})",
            patch.center_row(),
            patch.center_col()
        )));
    }
    let angles = pixel_angles(&window, &anchor.broadcast_as(window.shape())?)?;
    let zero = window.sqr()?.sum_keepdim(1)?.eq(0.0)?;
    let angles = zero.where_cond(&angles.zeros_like()?, &angles)?;
    Ok(angles.reshape((k, k))?)
}

/// Mean absolute difference of prediction and ground-truth similarity maps
/// over each patch's included pixels, averaged over patches. Patches whose
/// center or every pixel is masked out are skipped.
pub fn patch_similarity_loss(pred: &Tensor, gt: &Tensor, patches: &[PatchSpec], mask: &Tensor) -> Result<Tensor> {
    let pred = single_image(pred, "patch_similarity_loss pred")?;
    let gt = single_image(gt, "patch_similarity_loss gt")?;
    check_dims(&gt, pred.dims(), "patch_similarity_loss gt")?;
    let (_, _, h, w) = pred.dims4()?;
    let mask = mask.reshape((h, w)).map_err(|_| {
        Error::Shape(format!("patch_similarity_loss mask: expected {h}x{w}, got {:?}", mask.dims()))
    })?;
    if patches.is_empty() {
        return Err(Error::Argument("patch_similarity_loss needs at least one patch".into()));
    }
    let host_mask: Vec<f64> = mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut per_patch = Vec::with_capacity(patches.len());
    for patch in patches {
        patch.check_inside(h, w)?;
        if host_mask[patch.center_row() * w + patch.center_col()] == 0.0 {
            continue;
        }
        let (top, left, k) = (patch.top(), patch.left(), patch.side());
        let window_mask = mask.narrow(0, top, k)?.narrow(1, left, k)?;
        let count: f64 = (0..k)
            .flat_map(|r| (0..k).map(move |c| (r, c)))
            .map(|(r, c)| host_mask[(top + r) * w + left + c])
            .sum();
        if count == 0.0 {
            continue;
        }
        let diff = similarity_map(&pred, patch)?.sub(&similarity_map(&gt, patch)?)?.abs()?;
        per_patch.push((diff.mul(&window_mask)?.sum_all()? / count)?);
    }
    if per_patch.is_empty() {
        return Err(Error::Argument("every patch is masked out".into()));
    }
    Ok(Tensor::stack(&per_patch, 0)?.mean(0)?)
}

/// `log Σ exp` over the last dimension after sorting, so the result does not
/// depend on the order of the entries.
fn sorted_logsumexp(x: &Tensor) -> Result<Tensor> {
    let order = x.detach().arg_sort_last_dim(true)?;
    Ok(kernels::logsumexp_last(&x.gather(&order, D::Minus1)?)?)
}

/// Decoupled InfoNCE: per anchor `−log(Σ₊ exp(v·v⁺/τ) / Σ₋ exp(v·v⁻/τ))`,
/// averaged over anchors. Positives do not enter the denominator, so the
/// value can be negative.
pub fn contrastive_dce_loss(batch: &ContrastiveBatch) -> Result<Tensor> {
    let (m, c) = batch.anchors.dims2()?;
    let n = batch.negatives.dim(1)?;
    if n == 0 {
        return Err(Error::Argument("contrastive loss needs at least one negative".into()));
    }
    if !(batch.tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {}", batch.tau)));
    }
    check_dims(&batch.positives, &[m, 2, c], "contrastive positives")?;
    check_dims(&batch.negatives, &[m, n, c], "contrastive negatives")?;
    let v = batch.anchors.unsqueeze(1)?;
    let pos = (batch.positives.broadcast_mul(&v)?.sum(2)? / batch.tau)?;
    let neg = (batch.negatives.broadcast_mul(&v)?.sum(2)? / batch.tau)?;
    Ok(sorted_logsumexp(&neg)?.sub(&sorted_logsumexp(&pos)?)?.mean(0)?)
}
