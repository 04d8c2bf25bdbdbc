//! Minimal binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "HYPTNSR1"
//! dtype   u8       1 = f32, 2 = f64
//! rank    u8
//! pad     6 bytes  zero
//! dims    rank × u64
//! data    product(dims) elements, row-major
//! ```

use std::path::Path;

use super::SignalError;

const MAGIC: &[u8; 8] = b"HYPTNSR1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, SignalError> {
        Self::checked(dims, TensorData::F32(data))
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, SignalError> {
        Self::checked(dims, TensorData::F64(data))
    }

    fn checked(dims: Vec<usize>, data: TensorData) -> Result<Self, SignalError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(SignalError::Container(format!(
                "dims {dims:?} hold {n} elements, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(SignalError::Container("rank too large".into()));
        }
        Ok(TensorFile { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = match self.data {
            TensorData::F32(_) => 4,
            TensorData::F64(_) => 8,
        };
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(if width == 4 { 1 } else { 2 });
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0; 6]);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SignalError> {
        let bad = |m: &str| SignalError::Container(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let dtype = bytes[8];
        let rank = bytes[9] as usize;
        let header = 16 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| {
                let at = 16 + 8 * i;
                u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
            })
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dims overflow"))?;
        let body = &bytes[header..];
        let data = match dtype {
            1 if body.len() == 4 * n => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 if body.len() == 8 * n => TensorData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 | 2 => return Err(bad("body length does not match dims")),
            d => return Err(SignalError::Container(format!("unknown dtype code {d}"))),
        };
        Ok(TensorFile { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), SignalError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SignalError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
