use candle_core::{DType, Tensor};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// A `side × side` window (odd side) given by its center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    center_row: usize,
    center_col: usize,
    side: usize,
}

impl PatchSpec {
    /// Fails unless `side` is odd and the window fits in a `height × width` image.
    pub fn new(center_row: usize, center_col: usize, side: usize, height: usize, width: usize) -> Result<Self> {
        let p = Self {
            center_row,
            center_col,
            side,
        };
        p.check_inside(height, width)?;
        Ok(p)
    }

    pub fn center_row(&self) -> usize {
        self.center_row
    }

    pub fn center_col(&self) -> usize {
        self.center_col
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn top(&self) -> usize {
        self.center_row - self.side / 2
    }

    pub fn left(&self) -> usize {
        self.center_col - self.side / 2
    }

    pub(crate) fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        let r = self.side / 2;
        if self.side.is_multiple_of(2) {
            return Err(Error::Argument(format!("patch side must be odd, got {}", self.side)));
        }
        if self.center_row < r || self.center_col < r || self.center_row + r >= height || self.center_col + r >= width {
            return Err(Error::Argument(format!(
                "{0}x{0} patch at ({1}, {2}) does not fit in {height}x{width}",
                self.side, self.center_row, self.center_col
            )));
        }
        Ok(())
    }
}

/// Patch side covering 1/16 of the image area: a quarter of the shorter
/// side, made odd by rounding down (63 for 256, 15 for 64).
pub fn patch_side(height: usize, width: usize) -> usize {
    let s = (height.min(width) / 4).max(1);
    if s.is_multiple_of(2) {
        s - 1
    } else {
        s
    }
}

/// `n` patches with centers uniform over the positions where the window fits.
pub fn sample_patches<R: Rng>(height: usize, width: usize, n: usize, side: usize, rng: &mut R) -> Result<Vec<PatchSpec>> {
    if side.is_multiple_of(2) || side == 0 {
        return Err(Error::Argument(format!("patch side must be odd, got {side}")));
    }
    if side > height.min(width) {
        return Err(Error::Argument(format!("patch side {side} exceeds image {height}x{width}")));
    }
    let r = side / 2;
    Ok((0..n)
        .map(|_| PatchSpec {
            center_row: rng.random_range(r..height - r),
            center_col: rng.random_range(r..width - r),
            side,
        })
        .collect())
}

/// Which feature map a negative sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Features of the input image, `z_i`.
    Input,
    /// Features of the ground truth, `z_g`.
    Target,
}

/// A negative sample's origin: source map and flattened location `row·w + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLocation {
    pub source: FeatureSource,
    pub index: usize,
}

/// Anchors from `z_o`, positives at the same location of `z_i` and `z_g`,
/// negatives elsewhere on `z_i` and `z_g`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// `(M, C)`
    pub anchors: Tensor,
    /// `(M, 2, C)`: `z_i` then `z_g`.
    pub positives: Tensor,
    /// `(M, N, C)`
    pub negatives: Tensor,
    pub tau: f64,
    pub anchor_locations: Vec<usize>,
    pub negative_locations: Vec<Vec<FeatureLocation>>,
}

/// `(C, h, w)` or `(1, C, h, w)` → `(h·w, C)` unit-norm rows.
fn unit_tokens(z: &Tensor) -> Result<Tensor> {
    let z = match z.rank() {
        4 if z.dim(0)? == 1 => z.squeeze(0)?,
        3 => z.clone(),
        _ => return Err(Error::Shape(format!("expected a (C, h, w) feature map, got {:?}", z.dims()))),
    };
    let (c, h, w) = z.dims3()?;
    let tokens = z.reshape((c, h * w))?.t()?.contiguous()?;
    let norm = tokens.sqr()?.sum_keepdim(1)?.maximum(1e-24)?.sqrt()?;
    Ok(tokens.broadcast_div(&norm)?)
}

/// Samples `m` anchors (without replacement) and `n` negatives per anchor,
/// `⌈n/2⌉` from `z_i` and the rest from `z_g`, each set drawn without
/// replacement from the locations other than the anchor's. Feature vectors
/// are L2-normalized, so dot products are cosine similarities.
pub fn sample_contrastive<R: Rng>(
    z_i: &Tensor,
    z_o: &Tensor,
    z_g: &Tensor,
    m: usize,
    n: usize,
    tau: f64,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if z_i.dims() != z_o.dims() || z_g.dims() != z_o.dims() {
        return Err(Error::Shape(format!(
            "feature maps differ: {:?}, {:?}, {:?}",
            z_i.dims(),
            z_o.dims(),
            z_g.dims()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let (ti, to, tg) = (unit_tokens(z_i)?, unit_tokens(z_o)?, unit_tokens(z_g)?);
    let (hw, c) = to.dims2()?;
    if m == 0 || m > hw {
        return Err(Error::Argument(format!("anchors per image must be in 1..={hw}, got {m}")));
    }
    let from_input = n.div_ceil(2);
    if n == 0 || from_input > hw - 1 {
        return Err(Error::Argument(format!(
            "negatives per anchor must be in 1..={}, got {n}",
            2 * (hw - 1)
        )));
    }
    let anchors: Vec<usize> = index::sample(rng, hw, m).into_vec();
    let mut neg_i = Vec::with_capacity(m * from_input);
    let mut neg_g = Vec::with_capacity(m * (n - from_input));
    let mut locations = Vec::with_capacity(m);
    for &a in &anchors {
        let mut draw = |count: usize, source: FeatureSource, out: &mut Vec<u32>, locs: &mut Vec<FeatureLocation>| {
            for k in index::sample(rng, hw - 1, count) {
                let index = if k >= a { k + 1 } else { k };
                out.push(index as u32);
                locs.push(FeatureLocation { source, index });
            }
        };
        let mut locs = Vec::with_capacity(n);
        draw(from_input, FeatureSource::Input, &mut neg_i, &mut locs);
        draw(n - from_input, FeatureSource::Target, &mut neg_g, &mut locs);
        locations.push(locs);
    }
    let device = to.device();
    let idx = |v: &[u32]| Tensor::from_slice(v, v.len(), device);
    let anchor_idx: Vec<u32> = anchors.iter().map(|&a| a as u32).collect();
    let a_t = idx(&anchor_idx)?;
    let positives = Tensor::stack(&[ti.index_select(&a_t, 0)?, tg.index_select(&a_t, 0)?], 1)?;
    let mut parts = vec![ti.index_select(&idx(&neg_i)?, 0)?.reshape((m, from_input, c))?];
    if n > from_input {
        parts.push(tg.index_select(&idx(&neg_g)?, 0)?.reshape((m, n - from_input, c))?);
    }
    Ok(ContrastiveBatch {
        anchors: to.index_select(&a_t, 0)?,
        positives,
        negatives: Tensor::cat(&parts, 1)?,
        tau,
        anchor_locations: anchors,
        negative_locations: locations,
    })
}

impl ContrastiveBatch {
    /// Builds a batch from explicit vectors, used as given (no normalization).
    pub fn from_vectors(anchors: &[Vec<f64>], positives: &[[Vec<f64>; 2]], negatives: &[Vec<Vec<f64>>], tau: f64, dtype: DType) -> Result<Self> {
        let m = anchors.len();
        let c = anchors.first().map_or(0, Vec::len);
        let n = negatives.first().map_or(0, Vec::len);
        if positives.len() != m || negatives.len() != m {
            return Err(Error::Shape("anchors, positives and negatives must have equal counts".into()));
        }
        let flat = |rows: Vec<&Vec<f64>>| -> Result<Vec<f64>> {
            if rows.iter().any(|r| r.len() != c) {
                return Err(Error::Shape(format!("every vector must have dimension {c}")));
            }
            Ok(rows.into_iter().flatten().copied().collect())
        };
        if negatives.iter().any(|row| row.len() != n) {
            return Err(Error::Shape(format!("every anchor needs {n} negatives")));
        }
        let device = candle_core::Device::Cpu;
        let a = flat(anchors.iter().collect())?;
        let p = flat(positives.iter().flat_map(|p| p.iter()).collect())?;
        let q = flat(negatives.iter().flatten().collect())?;
        Ok(Self {
            anchors: Tensor::from_vec(a, (m, c), &device)?.to_dtype(dtype)?,
            positives: Tensor::from_vec(p, (m, 2, c), &device)?.to_dtype(dtype)?,
            negatives: Tensor::from_vec(q, (m, n, c), &device)?.to_dtype(dtype)?,
            tau,
            anchor_locations: Vec::new(),
            negative_locations: Vec::new(),
        })
    }
}
