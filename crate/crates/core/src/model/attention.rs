use candle_core::Tensor;
use rand::Rng;

use super::layers::{GroupNorm, Linear, ResBlock};
use super::params::Init;
use crate::error::Result;
use crate::kernels;

/// `(B, C, h, w)` → `(B, h·w, C)`
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, h·w, C)` → `(B, C, h, w)`
fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Depthwise 3×3 convolution followed by a pointwise projection, producing
/// one of the query/key/value token sequences.
#[derive(Debug, Clone)]
struct ConvProjection {
    depthwise: Tensor,
    pointwise: Linear,
}

impl ConvProjection {
    fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize) -> Result<Self> {
        Ok(Self {
            depthwise: init.normal("depthwise", &[channels, 3, 3], 1.0 / 3.0)?,
            pointwise: Linear::new(&mut init.push("pointwise"), channels, channels)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let spatial = kernels::depthwise3x3(x, &self.depthwise)?;
        self.pointwise.forward(&to_tokens(&spatial)?)
    }
}

/// Residual blocks, normalization, convolutional Q/K/V projection and
/// multi-head self-attention over the spatial positions of the bottleneck.
#[derive(Debug, Clone)]
pub(crate) struct MiddleBlock {
    res1: ResBlock,
    res2: ResBlock,
    norm: GroupNorm,
    query: ConvProjection,
    key: ConvProjection,
    value: ConvProjection,
    out: Linear,
    heads: usize,
}

impl MiddleBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            res1: ResBlock::new(&mut init.push("res1"), channels, groups)?,
            res2: ResBlock::new(&mut init.push("res2"), channels, groups)?,
            norm: GroupNorm::new(&mut init.push("norm"), channels, groups)?,
            query: ConvProjection::new(&mut init.push("query"), channels)?,
            key: ConvProjection::new(&mut init.push("key"), channels)?,
            value: ConvProjection::new(&mut init.push("value"), channels)?,
            out: Linear::new(&mut init.push("out"), channels, channels)?,
            heads,
        })
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        let (b, n, c) = t.dims3()?;
        Ok(t.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the block output and the attention probabilities
    /// `(B, heads, h·w, h·w)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = self.res2.forward(&self.res1.forward(x)?)?;
        let (b, c, h, w) = x.dims4()?;
        let normed = self.norm.forward(&x)?;
        let q = self.split_heads(&self.query.forward(&normed)?)?;
        let k = self.split_heads(&self.key.forward(&normed)?)?;
        let v = self.split_heads(&self.value.forward(&normed)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = kernels::softmax_last(&scores)?;
        let mixed = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, h * w, c))?;
        let out = from_tokens(&self.out.forward(&mixed)?, h, w)?;
        Ok(((x + out)?, attn))
    }
}
