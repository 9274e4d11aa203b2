//! Synthetic scenes: Voronoi reflectance, Gaussian illuminant mixtures and
//! Sobel pseudo edge labels.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{angle_between, chromaticity, dot, IlluminantMap, LinearImage, Plane};

pub const MIN_SURFACE_SIZE: usize = 32;
/// Maximum angle between a sampled light and neutral, degrees.
pub const MAX_LIGHT_TILT_DEG: f64 = 25.0;
/// Minimum pairwise angle between lights of one scene, degrees.
pub const MIN_LIGHT_SEPARATION_DEG: f64 = 3.0;
pub const INTENSITY_RANGE: (f64, f64) = (0.5, 1.5);

/// Lights and mixing layout of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_lights: usize,
    pub light_chromas: Vec<[f64; 3]>,
    /// Per-light intensity multiplying the unit chroma.
    pub intensities: Vec<f64>,
    /// `(x, y)` in `[0, 1]²`, x along columns.
    pub mixing_centers: Vec<[f64; 2]>,
    pub mixing_bandwidth: f64,
    pub surface_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_lights;
        if !(1..=3).contains(&k) {
            return Err(Error::Argument(format!("num_lights must be 1..=3, got {k}")));
        }
        if self.light_chromas.len() != k || self.intensities.len() != k || self.mixing_centers.len() != k {
            return Err(Error::Argument(format!(
                "scene with {k} lights has {} chromas, {} intensities, {} centers",
                self.light_chromas.len(),
                self.intensities.len(),
                self.mixing_centers.len()
            )));
        }
        for c in &self.light_chromas {
            let n = dot(c, c).sqrt();
            if (n - 1.0).abs() > 1e-6 || c.iter().any(|v| *v < 0.0) {
                return Err(Error::Argument(format!("light chroma {c:?} is not a unit non-negative vector")));
            }
        }
        for (i, a) in self.light_chromas.iter().enumerate() {
            for b in &self.light_chromas[i + 1..] {
                let angle = angle_between(*a, *b).unwrap_or(0.0);
                if angle < MIN_LIGHT_SEPARATION_DEG {
                    return Err(Error::Argument(format!("lights only {angle:.3}° apart")));
                }
            }
        }
        if let Some(s) = self.intensities.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Argument(format!("light intensity {s} must be positive")));
        }
        if self.mixing_centers.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("mixing centers must lie in [0, 1]²".into()));
        }
        if !(self.mixing_bandwidth > 0.0 && self.mixing_bandwidth.is_finite()) {
            return Err(Error::Argument(format!("mixing bandwidth {} must be positive", self.mixing_bandwidth)));
        }
        Ok(())
    }

    /// Draws a scene with `num_lights` lights: chromas within
    /// [`MAX_LIGHT_TILT_DEG`] of neutral and at least
    /// [`MIN_LIGHT_SEPARATION_DEG`] apart, intensities in
    /// [`INTENSITY_RANGE`], centers uniform, bandwidth in `bandwidth`.
    pub fn random<R: Rng>(rng: &mut R, num_lights: usize, bandwidth: (f64, f64)) -> Result<Self> {
        if !(1..=3).contains(&num_lights) {
            return Err(Error::Argument(format!("num_lights must be 1..=3, got {num_lights}")));
        }
        if !(bandwidth.0 > 0.0 && bandwidth.0 <= bandwidth.1) {
            return Err(Error::Argument(format!("bad bandwidth range {bandwidth:?}")));
        }
        let mut chromas: Vec<[f64; 3]> = Vec::with_capacity(num_lights);
        while chromas.len() < num_lights {
            let c = random_light_chroma(rng);
            let far = chromas
                .iter()
                .all(|o| angle_between(*o, c).unwrap_or(0.0) >= MIN_LIGHT_SEPARATION_DEG);
            if far {
                chromas.push(c);
            }
        }
        let spec = Self {
            num_lights,
            intensities: (0..num_lights).map(|_| rng.random_range(INTENSITY_RANGE.0..=INTENSITY_RANGE.1)).collect(),
            mixing_centers: (0..num_lights).map(|_| [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)]).collect(),
            mixing_bandwidth: rng.random_range(bandwidth.0..=bandwidth.1),
            surface_seed: rng.random(),
            light_chromas: chromas,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Unit chroma drawn uniformly (in solid angle) from the spherical cap of
/// half-angle [`MAX_LIGHT_TILT_DEG`] around neutral.
fn random_light_chroma<R: Rng>(rng: &mut R) -> [f64; 3] {
    let n = [1.0 / 3f64.sqrt(); 3];
    // orthonormal basis of the plane perpendicular to neutral
    let u = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let v = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    let cos_max = MAX_LIGHT_TILT_DEG.to_radians().cos();
    let cos_t: f64 = rng.random_range(cos_max..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = cos_t * n[k] + sin_t * (phi.cos() * u[k] + phi.sin() * v[k]);
    }
    // a 25° cap stays inside the positive octant (its edge is 54.7° away)
    chromaticity(c).expect("cap around neutral has positive norm").rgb()
}

/// Piecewise-smooth reflectance: 8–40 Voronoi regions with reflectance in
/// `[0.05, 0.95]³`, 10–30% of them achromatic, times a smooth shading field
/// in `[0.3, 1]`.
pub fn generate_surface<R: Rng>(rng: &mut R, height: usize, width: usize) -> Result<LinearImage> {
    if height < MIN_SURFACE_SIZE || width < MIN_SURFACE_SIZE {
        return Err(Error::Argument(format!(
            "surface must be at least {MIN_SURFACE_SIZE}x{MIN_SURFACE_SIZE}, got {height}x{width}"
        )));
    }
    let regions = rng.random_range(8..=40usize);
    let seeds: Vec<[f64; 2]> = (0..regions)
        .map(|_| [rng.random_range(0.0..height as f64), rng.random_range(0.0..width as f64)])
        .collect();
    let mut colors: Vec<[f64; 3]> = (0..regions)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.05..=0.95)))
        .collect();
    let fraction: f64 = rng.random_range(0.1..=0.3);
    let gray = ((fraction * regions as f64).round() as usize).max(1);
    for i in rand::seq::index::sample(rng, regions, gray) {
        let g = rng.random_range(0.05..=0.95);
        colors[i] = [g; 3];
    }
    let shading = ShadingField::random(rng);
    LinearImage::from_fn(height, width, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let nearest = seeds
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (s[0] - y).powi(2) + (s[1] - x).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("at least one region");
        let s = shading.at(y / height as f64, x / width as f64);
        colors[nearest].map(|v| v * s)
    })
}

/// `0.65 + 0.35·(a·cos(…) + (1−a)·cos(…))`, bounded to `[0.3, 1]`.
struct ShadingField {
    a: f64,
    freq: [f64; 4],
    phase: [f64; 2],
}

impl ShadingField {
    fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            a: rng.random_range(0.0..=1.0),
            freq: std::array::from_fn(|_| rng.random_range(-3.0..=3.0)),
            phase: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let w1 = (self.freq[0] * y + self.freq[1] * x + self.phase[0]).cos();
        let w2 = (self.freq[2] * y + self.freq[3] * x + self.phase[1]).cos();
        (0.65 + 0.35 * (self.a * w1 + (1.0 - self.a) * w2)).clamp(0.3, 1.0)
    }
}

/// Normalized Gaussian weights `α_k(p)` of each light at pixel `(row, col)`.
pub fn mixing_weights(spec: &SceneSpec, height: usize, width: usize, row: usize, col: usize) -> Vec<f64> {
    let p = [(col as f64 + 0.5) / width as f64, (row as f64 + 0.5) / height as f64];
    let two_s2 = 2.0 * spec.mixing_bandwidth * spec.mixing_bandwidth;
    let logits: Vec<f64> = spec
        .mixing_centers
        .iter()
        .map(|c| -((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) / two_s2)
        .collect();
    // shift by the max so distant centers cannot underflow every weight
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `Σ_k α_k(p)·s_k·c_k` per pixel.
pub fn generate_illuminant_field(height: usize, width: usize, spec: &SceneSpec) -> Result<IlluminantMap> {
    spec.validate()?;
    let lights: Vec<[f64; 3]> = spec
        .light_chromas
        .iter()
        .zip(&spec.intensities)
        .map(|(c, s)| c.map(|v| v * s))
        .collect();
    let mut data = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for c in 0..width {
            let alpha = mixing_weights(spec, height, width, r, c);
            let mut px = [0.0; 3];
            for (a, l) in alpha.iter().zip(&lights) {
                for k in 0..3 {
                    px[k] += a * l[k];
                }
            }
            data.extend_from_slice(&px);
        }
    }
    IlluminantMap::new(height, width, data)
}

/// Produces edge targets for the auxiliary edge decoder.
pub trait PseudoLabeler {
    fn label(&self, image: &LinearImage) -> Plane;
}

/// Rec. 709 luminance weights.
const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// 3×3 Sobel gradient magnitude of luminance, replicate-padded, divided by
/// its maximum.
#[derive(Debug, Clone, Copy, Default)]
pub struct SobelLabeler;

impl PseudoLabeler for SobelLabeler {
    fn label(&self, image: &LinearImage) -> Plane {
        pseudo_edge_labels(image)
    }
}

pub fn pseudo_edge_labels(image: &LinearImage) -> Plane {
    let (h, w) = image.dims();
    let luma: Vec<f64> = image.pixels().map(|p| dot(&p, &LUMA)).collect();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        luma[r * w + c]
    };
    let mag = Plane::from_fn(h, w, |r, c| {
        let (r, c) = (r as isize, c as isize);
        let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
        let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
            - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        gx.hypot(gy)
    });
    let top = mag.as_slice().iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return mag;
    }
    Plane::from_fn(h, w, |r, c| mag.get(r, c) / top)
}

/// Generator for sample `index` of a dataset with master seed `seed`:
/// independent of how many samples precede it.
pub fn child_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
