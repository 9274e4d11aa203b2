//! The multi-task network: a shared convolutional encoder, a transformer
//! middle block on the white-balance branch, three task decoders with skip
//! connections and a per-location projection head for contrastive features.
//!
//! ```text
//! image ─ stem ─ E1 ─ E2 ─ E3 ─ E4 ─┬─ middle ─ wb decoder ──── wb image
//!          │      │    │    │       │     └──── projection head ─ z
//!          │      │    │    │       ├─ achromatic decoder ─── weight map
//!          │      │    │    │       └─ edge decoder ───────── edge map
//!          └──────┴────┴────┴── skips into every decoder
//! ```

mod attention;
mod layers;
mod params;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{LinearImage, Plane};
use crate::kernels;
use attention::MiddleBlock;
use layers::{Conv, ConvNormAct, DecoderStage, EncoderStage, Linear};
pub use params::ParamStore;
use params::Init;

/// Input samples are clamped to this margin before the logit of the
/// white-balance residual.
const LOGIT_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    /// Width of the full-resolution stem feeding the last decoder skip.
    pub base_channels: usize,
    pub stage_channels: [usize; 4],
    pub attention_heads: usize,
    pub middle_blocks: usize,
    pub projection_dim: usize,
    /// Scales every channel count, rounded to a multiple of 8.
    pub width_multiplier: f64,
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_channels: 64,
            stage_channels: [64, 128, 256, 512],
            attention_heads: 8,
            middle_blocks: 1,
            projection_dim: 512,
            width_multiplier: 1.0,
            norm_groups: 8,
        }
    }
}

/// Channel counts after applying the width multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub base: usize,
    pub stages: [usize; 4],
    pub projection: usize,
}

impl ModelConfig {
    fn scale(&self, c: usize) -> usize {
        let scaled = (c as f64 * self.width_multiplier / 8.0).round() as usize * 8;
        scaled.max(8)
    }

    pub fn widths(&self) -> Widths {
        Widths {
            base: self.scale(self.base_channels),
            stages: self.stage_channels.map(|c| self.scale(c)),
            projection: self.scale(self.projection_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return bad(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return bad(format!("width_multiplier {} must be > 0", self.width_multiplier));
        }
        if self.base_channels == 0 || self.stage_channels.contains(&0) || self.projection_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.attention_heads == 0 || self.middle_blocks == 0 || self.norm_groups == 0 {
            return bad("attention_heads, middle_blocks and norm_groups must be positive".into());
        }
        let c4 = self.widths().stages[3];
        if !c4.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "bottleneck width {c4} is not divisible by {} attention heads",
                self.attention_heads
            ));
        }
        Ok(())
    }
}

/// Products of one forward pass. Spatial tensors are `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct NetworkOutputs {
    /// White-balanced image, `(B, 3, H, W)` in `[0, 1]`.
    pub wb_image: Tensor,
    /// Achromatic-pixel weights, `(B, 1, H, W)` in `[0, 1]`.
    pub weight_map: Tensor,
    /// Edge probabilities, `(B, 1, H, W)` in `[0, 1]`.
    pub edge_map: Tensor,
    /// Middle-block output, `(B, C4, H/16, W/16)`.
    pub bottleneck: Tensor,
}

impl NetworkOutputs {
    /// Batch item `index` as rasters: (wb image, weight map, edge map).
    pub fn item(&self, index: usize) -> Result<(LinearImage, Plane, Plane)> {
        let wb = LinearImage::from_tensor(&self.wb_image.get(index)?)?;
        let weight = Plane::from_tensor(&self.weight_map.get(index)?)?;
        let edge = Plane::from_tensor(&self.edge_map.get(index)?)?;
        Ok((wb, weight, edge))
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    stages: Vec<DecoderStage>,
    head: Conv,
}

impl Decoder {
    fn new<R: rand::Rng>(
        init: &mut Init<'_, R>,
        w: &Widths,
        groups: usize,
        out_channels: usize,
        head_gain: f64,
    ) -> Result<Self> {
        let [c1, c2, c3, c4] = w.stages;
        // (input, skip, output) per stage, deepest first
        let plan = [(c4, c3, c3), (c3, c2, c2), (c2, c1, c1), (c1, w.base, w.base)];
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_skip, c_out))| {
                DecoderStage::new(&mut init.push(i), c_in, c_skip, c_out, groups)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::with_std(&mut init.push("head"), w.base, out_channels, 1, head_gain)?;
        Ok(Self { stages, head })
    }

    /// `skips` ordered deepest first: E3, E2, E1, stem.
    fn forward(&self, x: &Tensor, skips: [&Tensor; 4]) -> Result<Tensor> {
        let mut h = x.clone();
        for (stage, skip) in self.stages.iter().zip(skips) {
            h = stage.forward(&h, skip)?;
        }
        self.head.forward(&h)
    }
}

struct EncoderFeatures {
    stem: Tensor,
    stages: Vec<Tensor>,
}

impl EncoderFeatures {
    fn skips(&self) -> [&Tensor; 4] {
        [&self.stages[2], &self.stages[1], &self.stages[0], &self.stem]
    }

    fn deepest(&self) -> &Tensor {
        &self.stages[3]
    }
}

/// The multi-task color-constancy network.
#[derive(Debug, Clone)]
pub struct TransCC {
    config: ModelConfig,
    params: ParamStore,
    stem: ConvNormAct,
    encoder: Vec<EncoderStage>,
    middle: Vec<MiddleBlock>,
    wb_decoder: Decoder,
    achromatic_decoder: Decoder,
    edge_decoder: Decoder,
    proj_hidden: Linear,
    proj_out: Linear,
}

impl TransCC {
    /// Builds a network with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, &mut rng, dtype)
    }

    pub fn build<R: rand::Rng>(config: &ModelConfig, rng: &mut R, dtype: DType) -> Result<Self> {
        config.validate()?;
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::Config(format!("unsupported dtype {dtype:?}")));
        }
        let w = config.widths();
        let g = config.norm_groups;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut root = Init::new(&mut params, rng);

        let stem = ConvNormAct::new(&mut root.push("stem"), 3, w.base, 3, g)?;
        let mut encoder = Vec::with_capacity(4);
        let mut c_prev = w.base;
        for (i, &c) in w.stages.iter().enumerate() {
            encoder.push(EncoderStage::new(&mut root.push(format!("encoder.{i}")), c_prev, c, g)?);
            c_prev = c;
        }
        let middle = (0..config.middle_blocks)
            .map(|i| {
                MiddleBlock::new(&mut root.push(format!("middle.{i}")), w.stages[3], config.attention_heads, g)
            })
            .collect::<Result<Vec<_>>>()?;
        // the white-balance head starts close to the identity mapping
        let wb_decoder = Decoder::new(&mut root.push("decoder.wb"), &w, g, 3, 0.1)?;
        let achromatic_decoder = Decoder::new(&mut root.push("decoder.achromatic"), &w, g, 1, 1.0)?;
        let edge_decoder = Decoder::new(&mut root.push("decoder.edge"), &w, g, 1, 1.0)?;
        let proj_hidden = Linear::new(&mut root.push("projection.hidden"), w.stages[3], w.projection)?;
        let proj_out = Linear::new(&mut root.push("projection.out"), w.projection, w.projection)?;

        Ok(Self {
            config: config.clone(),
            params,
            stem,
            encoder,
            middle,
            wb_decoder,
            achromatic_decoder,
            edge_decoder,
            proj_hidden,
            proj_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4().map_err(|_| {
            Error::Shape(format!("expected a (B, 3, H, W) batch, got {:?}", image.dims()))
        })?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "input is {h}x{w}; both sides must be positive multiples of 16 (resize or crop the image)"
            )));
        }
        Ok(())
    }

    fn encode(&self, image: &Tensor) -> Result<EncoderFeatures> {
        let stem = self.stem.forward(image)?;
        let mut stages = Vec::with_capacity(4);
        let mut h = stem.clone();
        for stage in &self.encoder {
            h = stage.forward(&h)?;
            stages.push(h.clone());
        }
        Ok(EncoderFeatures { stem, stages })
    }

    fn run_middle(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut maps = Vec::with_capacity(self.middle.len());
        for block in &self.middle {
            let (out, attn) = block.forward(&h)?;
            h = out;
            maps.push(attn);
        }
        Ok((h, maps))
    }

    /// Full multi-task forward pass on a `(B, 3, H, W)` batch.
    pub fn forward(&self, image: &Tensor) -> Result<NetworkOutputs> {
        self.check_input(image)?;
        let image = image.to_dtype(self.dtype())?;
        let feats = self.encode(&image)?;
        let (bottleneck, _) = self.run_middle(feats.deepest())?;
        let skips = feats.skips();

        let residual = self.wb_decoder.forward(&bottleneck, skips)?;
        let base = logit(&image.clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN)?)?;
        let wb_image = kernels::sigmoid(&(base + residual)?)?;
        let weight_map = kernels::sigmoid(&self.achromatic_decoder.forward(feats.deepest(), skips)?)?;
        let edge_map = kernels::sigmoid(&self.edge_decoder.forward(feats.deepest(), skips)?)?;
        Ok(NetworkOutputs {
            wb_image,
            weight_map,
            edge_map,
            bottleneck,
        })
    }

    /// Applies the two-layer projection head at every spatial location:
    /// `(B, C4, h, w)` → `(B, P, h, w)`.
    pub fn project_features(&self, features: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = features.dims4()?;
        let expected = self.config.widths().stages[3];
        if c != expected {
            return Err(Error::Shape(format!(
                "projection head expects {expected} channels, got {c}"
            )));
        }
        let tokens = features
            .to_dtype(self.dtype())?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let hidden = kernels::silu(&self.proj_hidden.forward(&tokens)?)?;
        let out = self.proj_out.forward(&hidden)?;
        let p = out.dim(2)?;
        Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, p, h, w))?)
    }

    /// Encoder → middle block(s) → projection head, skipping every decoder.
    pub fn encode_to_projection(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let image = image.to_dtype(self.dtype())?;
        let feats = self.encode(&image)?;
        let (mid, _) = self.run_middle(feats.deepest())?;
        self.project_features(&mid)
    }

    /// Attention probabilities of each middle block, `(B, heads, T, T)`.
    pub fn attention_maps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let image = image.to_dtype(self.dtype())?;
        let feats = self.encode(&image)?;
        Ok(self.run_middle(feats.deepest())?.1)
    }

    /// Convenience wrapper: forward on a single raster, detached from any graph.
    pub fn infer_image(&self, image: &LinearImage) -> Result<NetworkOutputs> {
        let t = image.to_tensor(self.dtype(), self.device())?;
        let out = self.forward(&t)?;
        Ok(NetworkOutputs {
            wb_image: out.wb_image.detach(),
            weight_map: out.weight_map.detach(),
            edge_map: out.edge_map.detach(),
            bottleneck: out.bottleneck.detach(),
        })
    }
}

fn logit(p: &Tensor) -> Result<Tensor> {
    let one_minus = p.affine(-1.0, 1.0)?;
    Ok(p.log()?.sub(&one_minus.log()?)?)
}
