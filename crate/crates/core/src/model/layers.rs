use candle_core::Tensor;
use rand::Rng;

use super::params::Init;
use crate::error::Result;
use crate::kernels;

const NORM_EPS: f64 = 1e-5;

/// Square convolution with bias, stride 1, "same" padding.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: Tensor,
    bias: Tensor,
    pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_std(init, c_in, c_out, k, 1.0)
    }

    /// `gain` scales the fan-in standard deviation.
    pub fn with_std<R: Rng>(
        init: &mut Init<'_, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let weight = init.normal("weight", &[c_out, c_in, k, k], gain / fan_in.sqrt())?;
        let bias = init.constant("bias", &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = kernels::conv2d(x, &self.weight, self.pad)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("gamma", &[channels], 1.0)?,
            beta: init.constant("beta", &[channels], 0.0)?,
            groups: gcd(channels, groups),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::group_norm(x, self.groups, &self.gamma, &self.beta, NORM_EPS)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// conv → group norm → SiLU
#[derive(Debug, Clone)]
pub(crate) struct ConvNormAct {
    conv: Conv,
    norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        c_in: usize,
        c_out: usize,
        k: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(&mut init.push("conv"), c_in, c_out, k)?,
            norm: GroupNorm::new(&mut init.push("norm"), c_out, groups)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::silu(&self.norm.forward(&self.conv.forward(x)?)?)?)
    }
}

/// Two 3×3 conv+norm layers with an identity shortcut.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    first: ConvNormAct,
    conv: Conv,
    norm: GroupNorm,
}

impl ResBlock {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            first: ConvNormAct::new(&mut init.push("conv1"), channels, channels, 3, groups)?,
            conv: Conv::new(&mut init.push("conv2"), channels, channels, 3)?,
            norm: GroupNorm::new(&mut init.push("norm2"), channels, groups)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.first.forward(x)?;
        let h = self.norm.forward(&self.conv.forward(&h)?)?;
        Ok(kernels::silu(&(x + h)?)?)
    }
}

/// Per-location fully connected layer over the channel axis, `(N, in) → (N, out)`.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.normal("weight", &[d_out, d_in], 1.0 / (d_in as f64).sqrt())?,
            bias: init.constant("bias", &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / d_in;
        let y = x
            .reshape((rows, d_in))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = self.bias.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Downsampling stage: 2×2 stride-2 convolution followed by a residual block.
#[derive(Debug, Clone)]
pub(crate) struct EncoderStage {
    down: ConvNormAct,
    res: ResBlock,
}

impl EncoderStage {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            down: ConvNormAct::new(&mut init.push("down"), 4 * c_in, c_out, 1, groups)?,
            res: ResBlock::new(&mut init.push("res"), c_out, groups)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(&kernels::space_to_depth(x)?)?;
        self.res.forward(&x)
    }
}

/// Upsampling stage: nearest ×2 + conv, concatenation with the skip tensor,
/// then a fusing conv.
#[derive(Debug, Clone)]
pub(crate) struct DecoderStage {
    up: ConvNormAct,
    fuse: ConvNormAct,
}

impl DecoderStage {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        c_in: usize,
        c_skip: usize,
        c_out: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: ConvNormAct::new(&mut init.push("up"), c_in, c_out, 3, groups)?,
            fuse: ConvNormAct::new(&mut init.push("fuse"), c_out + c_skip, c_out, 3, groups)?,
        })
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = self.up.forward(&kernels::upsample2x(x)?)?;
        self.fuse.forward(&Tensor::cat(&[&up, skip], 1)?)
    }
}
