//! Binary checkpoint container.
//!
//! Layout (little-endian): magic, `u32` version, `u64` epoch, three
//! length-prefixed UTF-8 strings (config hash, config JSON, dataset hash),
//! `u32` tensor count, then per tensor a length-prefixed name, a dtype tag
//! (`0` = f32, `1` = f64), a `u8` rank, `u64` dims and the raw values.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::networks::Model;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPCKPT01";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;
const MAX_STRING: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub config_hash: String,
    pub config_json: String,
    pub dataset_hash: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: u64, config_hash: &str, config_json: &str, dataset_hash: &str) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, var) in model.parameters() {
            let flat = var.as_tensor().flatten_all()?;
            let data = match var.dtype() {
                DType::F64 => TensorData::F64(flat.to_vec1()?),
                _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
            };
            tensors.push(NamedTensor {
                name: name.clone(),
                dims: var.dims().to_vec(),
                data,
            });
        }
        Ok(Self {
            epoch,
            config_hash: config_hash.to_string(),
            config_json: config_json.to_string(),
            dataset_hash: dataset_hash.to_string(),
            tensors,
        })
    }

    /// Copies the stored parameters into `model`; names and shapes must match exactly.
    pub fn restore(&self, model: &Model) -> Result<()> {
        let device: &Device = model.device();
        let values = self
            .tensors
            .iter()
            .map(|t| {
                let tensor = match &t.data {
                    TensorData::F32(v) => Tensor::from_slice(v, t.dims.as_slice(), device)?,
                    TensorData::F64(v) => Tensor::from_slice(v, t.dims.as_slice(), device)?,
                };
                Ok((t.name.clone(), tensor))
            })
            .collect::<Result<Vec<_>>>()?;
        model.load_parameters(&values)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for s in [&self.config_hash, &self.config_json, &self.dataset_hash] {
            put_str(&mut out, s);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            match &t.data {
                TensorData::F32(_) => out.push(0),
                TensorData::F64(_) => out.push(1),
            }
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let epoch = r.u64()?;
        let config_hash = r.string()?;
        let config_json = r.string()?;
        let dataset_hash = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: element count overflow")))?;
                dims.push(d);
            }
            let data = match tag {
                0 => TensorData::F32(r.values(numel, 4)?.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(r.values(numel, 8)?.map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                other => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {other}"))),
            };
            debug_assert_eq!(data.len(), numel);
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            epoch,
            config_hash,
            config_json,
            dataset_hash,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > MAX_STRING {
            return Err(Error::Checkpoint(format!("string of {n} bytes exceeds limit")));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn values(&mut self, numel: usize, width: usize) -> Result<std::slice::ChunksExact<'a, u8>> {
        let n = numel
            .checked_mul(width)
            .ok_or_else(|| Error::Checkpoint("tensor byte size overflow".into()))?;
        Ok(self.take(n)?.chunks_exact(width))
    }
}
