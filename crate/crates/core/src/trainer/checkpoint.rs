//! Binary checkpoint container.
//!
//! Layout: magic `TCCK`, `u32` container version, `u64` header length, a
//! JSON header, then the raw little-endian tensor samples in header order.
//! The header holds both configs, counters, the RNG state, the optimizer
//! hyperparameters and an index of every tensor (name, group, dims, byte
//! offset).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 4] = b"TCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    dims: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    best_val_mae: Option<f64>,
    rng: ChaCha8Rng,
    adam: AdamConfig,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub dtype: DType,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub best_val_mae: Option<f64>,
    pub rng: ChaCha8Rng,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Adam,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Argument(format!("cannot checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        other => return Err(Error::Argument(format!("cannot checkpoint dtype {other:?}"))),
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dtype = dtype_name(self.dtype)?;
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, group: Group, t: &Tensor, data: &mut Vec<u8>| -> Result<()> {
            if t.dtype() != self.dtype {
                return Err(Error::Argument(format!("tensor `{name}` is {:?}, checkpoint is {dtype}", t.dtype())));
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                group,
                dims: t.dims().to_vec(),
                offset: data.len() as u64,
            });
            tensor_bytes(t, data)
        };
        for (name, t) in &self.params {
            push(name, Group::Param, t, &mut data)?;
        }
        for (name, (m, v)) in &self.optimizer.moments {
            push(name, Group::AdamM, m, &mut data)?;
            push(name, Group::AdamV, v, &mut data)?;
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: dtype.into(),
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_mae: self.best_val_mae,
            rng: self.rng.clone(),
            adam: self.optimizer.config,
            adam_t: self.optimizer.t,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Argument(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(bad("missing TCCK magic".into()));
        }
        let version = u32::from_le_bytes(bytes.get(4..8).ok_or_else(|| bad("truncated".into()))?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let len = u64::from_le_bytes(bytes.get(8..16).ok_or_else(|| bad("truncated".into()))?.try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
        let data = &bytes[16 + len..];
        let (dtype, width) = match header.dtype.as_str() {
            "f32" => (DType::F32, 4),
            "f64" => (DType::F64, 8),
            other => return Err(bad(format!("unknown dtype `{other}`"))),
        };
        let mut params = BTreeMap::new();
        let mut m_map = BTreeMap::new();
        let mut v_map = BTreeMap::new();
        let mut expected_end = 0usize;
        for e in &header.tensors {
            let n: usize = e.dims.iter().product();
            let start = e.offset as usize;
            let end = start + n * width;
            let raw = data.get(start..end).ok_or_else(|| bad(format!("tensor `{}` runs past the end of the file", e.name)))?;
            let t = match dtype {
                DType::F32 => {
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                    Tensor::from_vec(v, e.dims.as_slice(), &Device::Cpu)?
                }
                _ => {
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Tensor::from_vec(v, e.dims.as_slice(), &Device::Cpu)?
                }
            };
            expected_end = expected_end.max(end);
            let map = match e.group {
                Group::Param => &mut params,
                Group::AdamM => &mut m_map,
                Group::AdamV => &mut v_map,
            };
            map.insert(e.name.clone(), t);
        }
        if expected_end != data.len() {
            return Err(bad(format!("{} trailing bytes", data.len() - expected_end)));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m_map {
            let v = v_map.remove(&name).ok_or_else(|| bad(format!("second moment of `{name}` missing")))?;
            moments.insert(name, (m, v));
        }
        if let Some(name) = v_map.keys().next() {
            return Err(bad(format!("first moment of `{name}` missing")));
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            dtype,
            epoch: header.epoch,
            step: header.step,
            best_val_mae: header.best_val_mae,
            rng: header.rng,
            params,
            optimizer: Adam {
                config: header.adam,
                t: header.adam_t,
                moments,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write then rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
