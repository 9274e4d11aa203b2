//! Synthetic multi-illuminant scenes with exact ground truth, the dataset
//! format and batch assembly.

pub mod format;
mod synth;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use synth::{
    child_rng, generate_illuminant_field, generate_surface, mixing_weights, pseudo_edge_labels, PseudoLabeler,
    SceneSpec, SobelLabeler, INTENSITY_RANGE, MAX_LIGHT_TILT_DEG, MIN_LIGHT_SEPARATION_DEG, MIN_SURFACE_SIZE,
};

use crate::error::{Error, Result};
use crate::imaging::{render_scene, IlluminantMap, LinearImage, PixelMask, Plane};
use format::{create_dir, join, read_json, read_tensor, write_json, write_tensor, RawTensor};

/// Version written to and required in every manifest.
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.7, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Argument(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

/// Whether generated samples carry an excluded rectangle, the synthetic
/// stand-in for a masked color chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskPolicy {
    Off,
    /// Rectangle whose sides are a uniform fraction of the image sides.
    Rect { min_fraction: f64, max_fraction: f64 },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::Rect {
            min_fraction: 0.1,
            max_fraction: 0.25,
        }
    }
}

impl MaskPolicy {
    fn validate(&self) -> Result<()> {
        if let MaskPolicy::Rect {
            min_fraction,
            max_fraction,
        } = *self
        {
            if !(min_fraction > 0.0 && min_fraction <= max_fraction && max_fraction < 1.0) {
                return Err(Error::Config(format!(
                    "mask fractions must satisfy 0 < min <= max < 1, got {min_fraction}, {max_fraction}"
                )));
            }
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R, height: usize, width: usize) -> Result<PixelMask> {
        match *self {
            MaskPolicy::Off => Ok(PixelMask::all(height, width)),
            MaskPolicy::Rect {
                min_fraction,
                max_fraction,
            } => {
                let mut side = |n: usize| ((rng.random_range(min_fraction..=max_fraction) * n as f64).round() as usize).clamp(1, n - 1);
                let (rh, rw) = (side(height), side(width));
                let top = rng.random_range(0..=height - rh);
                let left = rng.random_range(0..=width - rw);
                PixelMask::excluding_rect(height, width, top..top + rh, left..left + rw)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub num_lights: usize,
    /// Master generation seed; the sample's generator is `child_rng(seed, index)`.
    pub seed: u64,
    pub index: u64,
    pub split: Option<Split>,
    pub scene: SceneSpec,
}

/// One training example. Every sample is representable in `f32`, so the
/// on-disk round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub input: LinearImage,
    pub gt: LinearImage,
    pub illum: IlluminantMap,
    pub mask: PixelMask,
    pub edge_pseudo: Plane,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.input.dims()
    }
}

fn zero_masked(image: &LinearImage, mask: &PixelMask) -> Result<LinearImage> {
    LinearImage::from_fn(image.height(), image.width(), |r, c| {
        if mask.is_included(r, c) {
            image.pixel(r, c)
        } else {
            [0.0; 3]
        }
    })
}

/// Renders one scene. The surface comes from `spec.surface_seed`; `rng`
/// only drives the mask.
pub fn make_sample<R: Rng>(
    rng: &mut R,
    height: usize,
    width: usize,
    spec: &SceneSpec,
    mask_policy: &MaskPolicy,
    labeler: &dyn PseudoLabeler,
) -> Result<(LinearImage, LinearImage, IlluminantMap, PixelMask, Plane)> {
    mask_policy.validate()?;
    let mut surface_rng = child_rng(spec.surface_seed, 0);
    let gt = generate_surface(&mut surface_rng, height, width)?.quantize_f32();
    let illum = generate_illuminant_field(height, width, spec)?.quantize_f32();
    let input = render_scene(&gt, &illum)?.quantize_f32();
    let mask = mask_policy.draw(rng, height, width)?;
    let edge = labeler.label(&gt);
    let edge = Plane::from_fn(height, width, |r, c| edge.get(r, c) as f32 as f64);
    Ok((zero_masked(&input, &mask)?, zero_masked(&gt, &mask)?, illum, mask, edge))
}

/// Generation parameters of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Light counts drawn uniformly per sample.
    pub light_counts: Vec<usize>,
    pub bandwidth: (f64, f64),
    pub mask: MaskPolicy,
    pub split_ratios: [f64; 3],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            light_counts: vec![1, 2, 3],
            bandwidth: (0.15, 0.45),
            mask: MaskPolicy::default(),
            split_ratios: DEFAULT_SPLIT_RATIOS,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SURFACE_SIZE || self.width < MIN_SURFACE_SIZE {
            return Err(Error::Config(format!("image size must be at least {MIN_SURFACE_SIZE}")));
        }
        if self.light_counts.is_empty() || self.light_counts.iter().any(|k| !(1..=3).contains(k)) {
            return Err(Error::Config(format!("light_counts must be non-empty values in 1..=3, got {:?}", self.light_counts)));
        }
        if !(self.bandwidth.0 > 0.0 && self.bandwidth.0 <= self.bandwidth.1) {
            return Err(Error::Config(format!("bad bandwidth range {:?}", self.bandwidth)));
        }
        self.mask.validate()?;
        check_ratios(&self.split_ratios).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sample `index` of a dataset with master seed `seed`.
pub fn generate_record(config: &GenConfig, seed: u64, index: u64) -> Result<SampleRecord> {
    let mut rng = child_rng(seed, index);
    let k = config.light_counts[rng.random_range(0..config.light_counts.len())];
    let scene = SceneSpec::random(&mut rng, k, config.bandwidth)?;
    let (input, gt, illum, mask, edge_pseudo) = make_sample(&mut rng, config.height, config.width, &scene, &config.mask, &SobelLabeler)?;
    Ok(SampleRecord {
        input,
        gt,
        illum,
        mask,
        edge_pseudo,
        meta: SampleMeta {
            num_lights: k,
            seed,
            index,
            split: None,
            scene,
        },
    })
}

pub fn sample_id(index: u64) -> String {
    format!("{index:06}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| self.get(*s).iter().any(|x| x == id))
    }
}

fn check_ratios(ratios: &[f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    Ok(())
}

/// Seeded shuffle, then contiguous train/val/test partition. Val and test
/// get `floor(n·ratio)`, train gets the rest.
pub fn split_dataset<R: Rng>(ids: &[String], ratios: [f64; 3], rng: &mut R) -> Result<Splits> {
    check_ratios(&ratios)?;
    let mut ids = ids.to_vec();
    ids.shuffle(rng);
    let n = ids.len();
    // the tolerance keeps 0.7·10 = 7.000000000000001 and 0.29·100 from straddling an integer
    let alloc = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let (val, test) = (alloc(ratios[1]), alloc(ratios[2]));
    let train = n - val - test;
    let mut rest = ids.split_off(train);
    let test_ids = rest.split_off(val);
    Ok(Splits {
        train: ids,
        val: rest,
        test: test_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub splits: Splits,
    pub generation: Option<GenConfig>,
}

impl DatasetManifest {
    /// Sample counts per split.
    pub fn summary(&self) -> String {
        format!(
            "{} samples {}x{} (seed {}): train {}, val {}, test {}",
            self.count,
            self.height,
            self.width,
            self.seed,
            self.splits.train.len(),
            self.splits.val.len(),
            self.splits.test.len()
        )
    }
}

/// Generates `count` samples using up to `threads` workers. The result does
/// not depend on `threads`.
pub fn generate_dataset(config: &GenConfig, count: usize, seed: u64, threads: usize) -> Result<(Vec<SampleRecord>, DatasetManifest)> {
    config.validate()?;
    let threads = threads.clamp(1, count.max(1));
    let chunk = count.div_ceil(threads).max(1);
    let mut records: Vec<SampleRecord> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|start| {
                scope.spawn(move || {
                    (start..(start + chunk).min(count))
                        .map(|i| generate_record(config, seed, i as u64))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let ids: Vec<String> = (0..count as u64).map(sample_id).collect();
    // the split stream sits past every sample stream
    let splits = split_dataset(&ids, config.split_ratios, &mut child_rng(seed, u64::MAX))?;
    for (r, id) in records.iter_mut().zip(&ids) {
        r.meta.split = splits.split_of(id);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        count,
        seed,
        height: config.height,
        width: config.width,
        splits,
        generation: Some(config.clone()),
    };
    Ok((records, manifest))
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn expect_dims(t: &RawTensor, dims: &[usize], path: &Path) -> Result<()> {
    if t.dims != dims {
        return Err(Error::format(path, format!("expected dims {dims:?}, found {:?}", t.dims)));
    }
    Ok(())
}

pub fn write_record(dir: &Path, record: &SampleRecord) -> Result<()> {
    create_dir(dir)?;
    let (h, w) = record.dims();
    write_tensor(&dir.join("input.t"), &[h, w, 3], &to_f32(record.input.as_slice()))?;
    write_tensor(&dir.join("gt.t"), &[h, w, 3], &to_f32(record.gt.as_slice()))?;
    write_tensor(&dir.join("illum.t"), &[h, w, 3], &to_f32(record.illum.as_slice()))?;
    let mask: Vec<f32> = record.mask.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_tensor(&dir.join("mask.t"), &[h, w], &mask)?;
    write_tensor(&dir.join("edge.t"), &[h, w], &to_f32(record.edge_pseudo.as_slice()))?;
    write_json(&dir.join("meta"), &record.meta)
}

pub fn read_record(dir: &Path) -> Result<SampleRecord> {
    let load = |name: &str, dims: &[usize]| -> Result<RawTensor> {
        let path = dir.join(name);
        let t = read_tensor(&path)?;
        if !dims.is_empty() {
            expect_dims(&t, dims, &path)?;
        }
        Ok(t)
    };
    let input = load("input.t", &[])?;
    let (h, w) = match input.dims[..] {
        [h, w, 3] => (h, w),
        _ => return Err(Error::format(dir.join("input.t"), format!("expected (H, W, 3), found {:?}", input.dims))),
    };
    let wrap = |name: &str, r: Result<LinearImage>| r.map_err(|e| Error::format(dir.join(name), e.to_string()));
    let gt = load("gt.t", &[h, w, 3])?;
    let illum = load("illum.t", &[h, w, 3])?;
    let mask = load("mask.t", &[h, w])?;
    let edge = load("edge.t", &[h, w])?;
    let mask = PixelMask::new(h, w, mask.data.iter().map(|&v| v != 0.0).collect())
        .map_err(|e| Error::format(dir.join("mask.t"), e.to_string()))?;
    Ok(SampleRecord {
        input: wrap("input.t", LinearImage::new(h, w, to_f64(&input.data)))?,
        gt: wrap("gt.t", LinearImage::new(h, w, to_f64(&gt.data)))?,
        illum: IlluminantMap::new(h, w, to_f64(&illum.data)).map_err(|e| Error::format(dir.join("illum.t"), e.to_string()))?,
        mask,
        edge_pseudo: Plane::new(h, w, to_f64(&edge.data)).map_err(|e| Error::format(dir.join("edge.t"), e.to_string()))?,
        meta: read_json(&dir.join("meta"))?,
    })
}

pub fn write_dataset(records: &[SampleRecord], manifest: &DatasetManifest, root: &Path) -> Result<()> {
    if records.len() != manifest.count {
        return Err(Error::Argument(format!("{} records for a manifest of {}", records.len(), manifest.count)));
    }
    create_dir(root)?;
    for r in records {
        write_record(&join(root, &[&sample_id(r.meta.index)]), r)?;
    }
    write_json(&root.join(MANIFEST_FILE), manifest)
}

/// Read-side handle: the manifest plus lazy per-sample loading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest: DatasetManifest = read_json(&path)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(path, format!("format version {} (expected {FORMAT_VERSION})", manifest.version)));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn load(&self, id: &str) -> Result<SampleRecord> {
        read_record(&self.root.join(id))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SampleRecord>> {
        self.manifest.splits.get(split).iter().map(|id| self.load(id)).collect()
    }
}

pub fn read_dataset(root: &Path) -> Result<(Vec<SampleRecord>, DatasetManifest)> {
    let ds = Dataset::open(root)?;
    let records = (0..ds.manifest.count as u64).map(|i| ds.load(&sample_id(i))).collect::<Result<_>>()?;
    Ok((records, ds.manifest))
}

/// Stacked network tensors for a list of samples: images `(B, 3, H, W)`,
/// mask and edge maps `(B, 1, H, W)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor,
    pub gt: Tensor,
    pub mask: Tensor,
    pub edge: Tensor,
    pub num_lights: Vec<usize>,
}

impl Batch {
    pub fn from_records(records: &[&SampleRecord], dtype: DType, device: &Device) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let dims = records[0].dims();
        if let Some(r) = records.iter().find(|r| r.dims() != dims) {
            return Err(Error::Shape(format!("batch mixes {dims:?} and {:?} samples", r.dims())));
        }
        let stack = |f: &dyn Fn(&SampleRecord) -> Result<Tensor>| -> Result<Tensor> {
            let parts = records.iter().map(|r| f(r)).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        };
        Ok(Self {
            input: stack(&|r| r.input.to_tensor(dtype, device))?,
            gt: stack(&|r| r.gt.to_tensor(dtype, device))?,
            mask: stack(&|r| r.mask.to_tensor(dtype, device))?,
            edge: stack(&|r| r.edge_pseudo.to_tensor(dtype, device))?,
            num_lights: records.iter().map(|r| r.meta.num_lights).collect(),
        })
    }
}
