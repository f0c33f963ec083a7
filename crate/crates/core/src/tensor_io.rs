//! The `IMDT` tensor interchange format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `b"IMDT"`                           |
//! | 4            | version, always `1`                       |
//! | 5            | dtype code: 0 = f32, 1 = f64, 2 = u8      |
//! | 6            | rank (0..=4)                              |
//! | 7..7+4*rank  | shape, one `u32` per axis                 |
//! | rest         | row-major payload, exactly `prod(shape)` elements |
//!
//! Every tensor file may carry a JSON sidecar (`<file>.json`) describing what
//! it holds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"IMDT";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A rank <= 4 numeric array.
#[derive(Debug, Clone, PartialEq)]
pub struct NdTensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl NdTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(CoreError::Shape(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        if shape.iter().any(|d| *d > u32::MAX as usize) {
            return Err(CoreError::Shape("axis length does not fit in u32".into()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        let finite = match &data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::U8(_) => true,
        };
        if !finite {
            return Err(CoreError::Invalid("tensor contains non-finite values".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    /// Values widened to f64 regardless of storage type.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|x| *x as f64).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dt = self.dtype();
        let mut out = Vec::with_capacity(7 + 4 * self.shape.len() + self.data.len() * dt.size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dt.code());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: String| CoreError::Format { offset, reason };
        if bytes.len() < 4 {
            return Err(fail(bytes.len(), "file too short for magic".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let header = |i: usize| bytes.get(i).copied().ok_or_else(|| fail(i, "truncated header".into()));
        let version = header(4)?;
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let code = header(5)?;
        let dt = DType::from_code(code).ok_or_else(|| fail(5, format!("unknown dtype code {code}")))?;
        let rank = header(6)? as usize;
        if rank > MAX_RANK {
            return Err(fail(6, format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut pos = 7;
        for _ in 0..rank {
            let raw = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| fail(bytes.len(), "truncated shape".into()))?;
            shape.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        let expected = n
            .checked_mul(dt.size())
            .ok_or_else(|| fail(pos, "payload size overflows".into()))?;
        let payload = &bytes[pos..];
        if payload.len() < expected {
            return Err(fail(
                bytes.len(),
                format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
            ));
        }
        if payload.len() > expected {
            return Err(fail(pos + expected, format!("{} trailing bytes", payload.len() - expected)));
        }
        let data = match dt {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Self::new(shape, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// JSON metadata stored next to a tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub name: String,
    pub stride: Option<usize>,
    pub image_id: Option<String>,
}

impl TensorSidecar {
    pub fn path_for(tensor_path: &Path) -> PathBuf {
        let mut s = tensor_path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn write_for(&self, tensor_path: &Path) -> Result<()> {
        fs::write(Self::path_for(tensor_path), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_for(tensor_path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(Self::path_for(tensor_path))?)?)
    }
}
