//! Image rasters, illuminant maps and the angular-error primitives shared by
//! the loss, data and evaluation modules.
//!
//! Rasters are stored row-major with interleaved RGB (`[r, g, b]` per pixel)
//! in `f64`. Tensors handed to the network use the `(1, 3, H, W)` layout.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Denominator floor used whenever an image is divided by another image.
pub const DEFAULT_EPSILON: f64 = 1e-4;

macro_rules! rgb_raster {
    ($ty:ident, $what:literal) => {
        impl $ty {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            pub fn pixel_count(&self) -> usize {
                self.height * self.width
            }

            /// Interleaved RGB samples, row-major.
            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.data
            }

            pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
                let i = 3 * (row * self.width + col);
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
                self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
            }

            pub fn from_fn(
                height: usize,
                width: usize,
                mut f: impl FnMut(usize, usize) -> [f64; 3],
            ) -> Result<Self> {
                let mut data = Vec::with_capacity(height * width * 3);
                for r in 0..height {
                    for c in 0..width {
                        data.extend_from_slice(&f(r, c));
                    }
                }
                Self::new(height, width, data)
            }

            pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
                Self::from_fn(height, width, |_, _| rgb)
            }

            /// `(1, 3, H, W)` tensor of the given dtype.
            pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
                let (h, w) = self.dims();
                let mut planar = vec![0f64; 3 * h * w];
                for (i, p) in self.pixels().enumerate() {
                    for k in 0..3 {
                        planar[k * h * w + i] = p[k];
                    }
                }
                Ok(Tensor::from_vec(planar, (1, 3, h, w), device)?.to_dtype(dtype)?)
            }

            /// Accepts `(3, H, W)` or `(1, 3, H, W)` tensors.
            pub fn from_tensor(t: &Tensor) -> Result<Self> {
                let t = match t.rank() {
                    4 => t.squeeze(0)?,
                    3 => t.clone(),
                    r => return Err(Error::Shape(format!("expected a 3-channel raster, got rank {r}"))),
                };
                let (c, h, w) = t.dims3()?;
                if c != 3 {
                    return Err(Error::Shape(format!("expected 3 channels, got {c}")));
                }
                let planar = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                let mut data = vec![0f64; 3 * h * w];
                for i in 0..h * w {
                    for k in 0..3 {
                        data[3 * i + k] = planar[k * h * w + i];
                    }
                }
                Self::new(h, w, data)
            }

            /// Rounds every sample to the nearest `f32`, the precision of the
            /// on-disk format.
            pub fn quantize_f32(&self) -> Self {
                Self {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|&v| v as f32 as f64).collect(),
                }
            }

            fn check_same_dims(&self, other_dims: (usize, usize), op: &str) -> Result<()> {
                if self.dims() != other_dims {
                    return Err(Error::Shape(format!(
                        "{op}: {} is {}x{}, other operand is {}x{}",
                        $what, self.height, self.width, other_dims.0, other_dims.1
                    )));
                }
                Ok(())
            }
        }
    };
}

fn validate_rgb(height: usize, width: usize, data: &[f64], what: &str) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("{what} must be non-empty")));
    }
    if data.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "{what}: {} samples for {height}x{width}x3",
            data.len()
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(format!(
            "{what}: sample {} at pixel ({}, {}) is {} (must be finite and >= 0)",
            i % 3,
            (i / 3) / width,
            (i / 3) % width,
            data[i]
        )));
    }
    Ok(())
}

/// Linear-light RGB image. All samples are finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LinearImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        validate_rgb(height, width, &data, "image")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Multiplies every sample by `factor` (must be positive).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::Argument(format!("scale factor {factor} must be > 0")));
        }
        Self::new(
            self.height,
            self.width,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

rgb_raster!(LinearImage, "image");

/// Per-pixel illuminant color. Samples are finite and non-negative; maps
/// produced from strictly positive observations are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminantMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl IlluminantMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        validate_rgb(height, width, &data, "illuminant map")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }
}

rgb_raster!(IlluminantMap, "illuminant map");

/// Unit-norm, non-negative RGB direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChromaVector([f64; 3]);

impl ChromaVector {
    pub fn neutral() -> Self {
        let v = 1.0 / 3f64.sqrt();
        Self([v, v, v])
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }

    /// Angle to `other` in degrees.
    pub fn angle_to(&self, other: &ChromaVector) -> f64 {
        vector_angle(&self.0, &other.0).to_degrees()
    }
}

/// Scalar field over the pixel grid (weight maps, edge maps, per-pixel values).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane: {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, 1, self.height, self.width), device)?
            .to_dtype(dtype)?)
    }

    /// Accepts `(H, W)`, `(1, H, W)` or `(1, 1, H, W)` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        if dims.len() < 2 || dims[..dims.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::Shape(format!("expected a single-channel map, got {dims:?}")));
        }
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(h, w, data)
    }
}

/// Marks which pixels take part in losses and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    included: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, included: Vec<bool>) -> Result<Self> {
        if included.len() != height * width {
            return Err(Error::Shape(format!(
                "mask: {} entries for {height}x{width}",
                included.len()
            )));
        }
        if !included.iter().any(|&b| b) {
            return Err(Error::Argument("mask excludes every pixel".into()));
        }
        Ok(Self {
            height,
            width,
            included,
        })
    }

    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            included: vec![true; height * width],
        }
    }

    /// Mask with the half-open rectangle `rows × cols` excluded.
    pub fn excluding_rect(
        height: usize,
        width: usize,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Self> {
        let mut included = vec![true; height * width];
        for r in rows.clone() {
            for c in cols.clone() {
                if r < height && c < width {
                    included[r * width + c] = false;
                }
            }
        }
        Self::new(height, width, included)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_included(&self, row: usize, col: usize) -> bool {
        self.included[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.included
    }

    pub fn included_count(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    /// `(1, 1, H, W)` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f64> = self.included.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Per-pixel angles in degrees, each in `[0, 180]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMap {
    height: usize,
    width: usize,
    angles: Vec<f64>,
}

impl AngleMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.angles[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.angles
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.angles.clone(),
        }
    }
}

pub(crate) fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Angle in radians as `atan2(‖a × b‖, a · b)`, accurate near 0 and π
/// unlike `acos` of the cosine.
pub(crate) fn vector_angle(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    norm(&cross).atan2(dot(a, b))
}

/// Angle between two RGB vectors in degrees, `None` if either has zero norm.
pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> Option<f64> {
    let denom = norm(&a) * norm(&b);
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some(vector_angle(&a, &b).to_degrees())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Argument(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Pixelwise `numerator / max(denominator, epsilon)`.
pub fn estimate_illuminant_map(
    numerator: &LinearImage,
    denominator: &LinearImage,
    epsilon: f64,
) -> Result<IlluminantMap> {
    check_epsilon(epsilon)?;
    numerator.check_same_dims(denominator.dims(), "estimate_illuminant_map")?;
    let data = numerator
        .as_slice()
        .iter()
        .zip(denominator.as_slice())
        .map(|(n, d)| n / d.max(epsilon))
        .collect();
    IlluminantMap::new(numerator.height(), numerator.width(), data)
}

/// Per-pixel angle between two illuminant maps, in degrees.
pub fn angular_error_map(a: &IlluminantMap, b: &IlluminantMap) -> Result<AngleMap> {
    a.check_same_dims(b.dims(), "angular_error_map")?;
    let (h, w) = a.dims();
    let mut angles = Vec::with_capacity(h * w);
    for (i, (pa, pb)) in a.pixels().zip(b.pixels()).enumerate() {
        let angle = angle_between(pa, pb).ok_or_else(|| {
            Error::Numeric(format!("zero-norm illuminant at pixel ({}, {})", i / w, i % w))
        })?;
        angles.push(angle);
    }
    Ok(AngleMap {
        height: h,
        width: w,
        angles,
    })
}

/// Forward image formation: `surface ⊙ illum`.
pub fn render_scene(surface: &LinearImage, illum: &IlluminantMap) -> Result<LinearImage> {
    surface.check_same_dims(illum.dims(), "render_scene")?;
    let data = surface
        .as_slice()
        .iter()
        .zip(illum.as_slice())
        .map(|(s, l)| s * l)
        .collect();
    LinearImage::new(surface.height(), surface.width(), data)
}

/// Removes a known illuminant: `observed / max(illum, epsilon)`.
pub fn white_balance(
    observed: &LinearImage,
    illum: &IlluminantMap,
    epsilon: f64,
) -> Result<LinearImage> {
    check_epsilon(epsilon)?;
    observed.check_same_dims(illum.dims(), "white_balance")?;
    let data = observed
        .as_slice()
        .iter()
        .zip(illum.as_slice())
        .map(|(o, l)| o / l.max(epsilon))
        .collect();
    LinearImage::new(observed.height(), observed.width(), data)
}

/// Normalizes a non-negative RGB vector to unit Euclidean norm.
pub fn chromaticity(v: [f64; 3]) -> Result<ChromaVector> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Argument(format!("chromaticity of {v:?}: components must be finite and >= 0")));
    }
    let n = norm(&v);
    if n == 0.0 {
        return Err(Error::Numeric("chromaticity of the zero vector".into()));
    }
    Ok(ChromaVector([v[0] / n, v[1] / n, v[2] / n]))
}

/// Mean of `values` over the included pixels of `mask`.
pub fn masked_mean(values: &Plane, mask: &PixelMask) -> Result<f64> {
    if values.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "masked_mean: values {:?} vs mask {:?}",
            values.dims(),
            mask.dims()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &inc) in values.as_slice().iter().zip(mask.as_slice()) {
        if inc {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Argument("masked_mean over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_map(h: usize, w: usize, rgb: [f64; 3]) -> IlluminantMap {
        IlluminantMap::from_fn(h, w, |_, _| rgb).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> LinearImage {
        LinearImage::from_fn(h, w, |_, _| {
            [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
        })
        .unwrap()
    }

    #[test]
    fn division_examples() {
        let num = LinearImage::filled(2, 2, [0.4, 0.2, 0.1]).unwrap();
        let den = LinearImage::filled(2, 2, [0.4, 0.4, 0.4]).unwrap();
        let m = estimate_illuminant_map(&num, &den, DEFAULT_EPSILON).unwrap();
        assert_eq!(m.pixel(1, 1), [1.0, 0.5, 0.25]);

        let same = estimate_illuminant_map(&den, &den, DEFAULT_EPSILON).unwrap();
        assert!(same.as_slice().iter().all(|&g| g == 1.0));

        let tiny = LinearImage::filled(1, 1, [1e-4; 3]).unwrap();
        let zero = LinearImage::filled(1, 1, [0.0; 3]).unwrap();
        let m = estimate_illuminant_map(&tiny, &zero, 1e-4).unwrap();
        assert_eq!(m.pixel(0, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn division_errors() {
        let a = LinearImage::filled(2, 2, [1.0; 3]).unwrap();
        let b = LinearImage::filled(2, 3, [1.0; 3]).unwrap();
        assert!(matches!(estimate_illuminant_map(&a, &b, 1e-4), Err(Error::Shape(_))));
        assert!(matches!(estimate_illuminant_map(&a, &a, 0.0), Err(Error::Argument(_))));
        assert!(matches!(estimate_illuminant_map(&a, &a, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn angular_examples() {
        let a = uniform_map(2, 2, [1.0, 2.0, 1.0]);
        let b = uniform_map(2, 2, [1.0, 1.0, 1.0]);
        let m = angular_error_map(&a, &b).unwrap();
        // cos = 4 / sqrt(18)
        let expected = (4.0 / 18f64.sqrt()).acos().to_degrees();
        assert!((m.get(0, 0) - 19.4712).abs() < 1e-4);
        assert!((m.get(1, 1) - expected).abs() < 1e-12);

        let same = angular_error_map(&a, &a).unwrap();
        assert!(same.as_slice().iter().all(|&x| x.abs() < 1e-6));

        let x = uniform_map(1, 1, [1.0, 0.0, 0.0]);
        let y = uniform_map(1, 1, [0.0, 1.0, 0.0]);
        assert!((angular_error_map(&x, &y).unwrap().get(0, 0) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn angular_error_names_zero_pixel() {
        let a = IlluminantMap::from_fn(2, 3, |r, c| if (r, c) == (1, 2) { [0.0; 3] } else { [1.0; 3] })
            .unwrap();
        let b = uniform_map(2, 3, [1.0; 3]);
        match angular_error_map(&a, &b) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("(1, 2)"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn angular_error_scale_invariant_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_image(&mut rng, 6, 5, 0.01, 2.0);
            let b = random_image(&mut rng, 6, 5, 0.01, 2.0);
            let a = IlluminantMap::new(6, 5, a.into_vec()).unwrap();
            let b = IlluminantMap::new(6, 5, b.into_vec()).unwrap();
            let base = angular_error_map(&a, &b).unwrap();
            let swapped = angular_error_map(&b, &a).unwrap();
            assert_eq!(base, swapped);

            let scale = |m: &IlluminantMap, rng: &mut ChaCha8Rng| {
                let mut out = Vec::new();
                for p in m.pixels() {
                    let s = rng.random_range(0.1..10.0);
                    out.extend(p.iter().map(|v| v * s));
                }
                IlluminantMap::new(6, 5, out).unwrap()
            };
            let sa = scale(&a, &mut rng);
            let sb = scale(&b, &mut rng);
            let scaled = angular_error_map(&sa, &sb).unwrap();
            for (x, y) in base.as_slice().iter().zip(scaled.as_slice()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn render_and_balance_examples() {
        let s = LinearImage::filled(2, 2, [0.5; 3]).unwrap();
        let m = uniform_map(2, 2, [1.0, 2.0, 1.0]);
        let obs = render_scene(&s, &m).unwrap();
        assert_eq!(obs.pixel(0, 1), [0.5, 1.0, 0.5]);
        let wb = white_balance(&obs, &m, DEFAULT_EPSILON).unwrap();
        assert_eq!(wb.pixel(1, 0), [0.5, 0.5, 0.5]);

        let ones = uniform_map(2, 2, [1.0; 3]);
        assert_eq!(render_scene(&s, &ones).unwrap(), s);
        assert_eq!(white_balance(&obs, &ones, DEFAULT_EPSILON).unwrap(), obs);
    }

    #[test]
    fn render_balance_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s = random_image(&mut rng, 5, 7, 0.0, 1.0);
            let illum = random_image(&mut rng, 5, 7, 2e-4, 3.0);
            let illum = IlluminantMap::new(5, 7, illum.into_vec()).unwrap();
            let obs = render_scene(&s, &illum).unwrap();
            let back = white_balance(&obs, &illum, DEFAULT_EPSILON).unwrap();
            let dev = s
                .as_slice()
                .iter()
                .zip(back.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-6, "{dev}");

            // recover the illuminant where the surface clears the floor
            let est = estimate_illuminant_map(&obs, &s, DEFAULT_EPSILON).unwrap();
            for ((e, t), sv) in est.as_slice().iter().zip(illum.as_slice()).zip(s.as_slice()) {
                if *sv > DEFAULT_EPSILON {
                    assert!((e - t).abs() <= 1e-9 * t.max(1.0));
                }
            }
        }
    }

    #[test]
    fn chromaticity_examples() {
        let c = chromaticity([1.0, 1.0, 1.0]).unwrap().rgb();
        assert!(c.iter().all(|v| (v - 0.57735).abs() < 1e-5));
        assert_eq!(chromaticity([2.0, 0.0, 0.0]).unwrap().rgb(), [1.0, 0.0, 0.0]);
        let c = chromaticity([3.0, 4.0, 0.0]).unwrap().rgb();
        assert!((c[0] - 0.6).abs() < 1e-12 && (c[1] - 0.8).abs() < 1e-12 && c[2] == 0.0);
        assert!(matches!(chromaticity([0.0; 3]), Err(Error::Numeric(_))));
    }

    #[test]
    fn chromaticity_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.01..5.0)];
            let c = chromaticity(v).unwrap();
            let cc = chromaticity(c.rgb()).unwrap();
            let n = norm(&c.rgb());
            assert!((n - 1.0).abs() < 1e-6);
            for k in 0..3 {
                assert!((c.rgb()[k] - cc.rgb()[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masked_mean_examples() {
        let v = Plane::filled(3, 3, 3.0);
        assert_eq!(masked_mean(&v, &PixelMask::all(3, 3)).unwrap(), 3.0);

        let v = Plane::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = PixelMask::new(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(masked_mean(&v, &m).unwrap(), 2.5);

        assert!(PixelMask::new(2, 2, vec![false; 4]).is_err());
        let wrong = PixelMask::all(3, 2);
        assert!(matches!(masked_mean(&v, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_mean_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (9, 13);
        let vals = Plane::from_fn(h, w, |_, _| rng.random_range(-5.0..5.0));
        let mut inc: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.6)).collect();
        inc[0] = true;
        let mask = PixelMask::new(h, w, inc).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for r in 0..h {
            for c in 0..w {
                if mask.is_included(r, c) {
                    sum += vals.get(r, c);
                    n += 1.0;
                }
            }
        }
        assert_eq!(masked_mean(&vals, &mask).unwrap(), sum / n);
    }

    #[test]
    fn tensor_round_trip() {
        let img = LinearImage::from_fn(3, 4, |r, c| [r as f64, c as f64, 0.5]).unwrap();
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 4]);
        assert_eq!(LinearImage::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn rejects_negative_samples() {
        assert!(LinearImage::new(1, 1, vec![0.1, -0.1, 0.2]).is_err());
        assert!(LinearImage::new(1, 1, vec![0.1, f64::NAN, 0.2]).is_err());
        assert!(LinearImage::new(1, 2, vec![0.1, 0.1, 0.2]).is_err());
    }
}
