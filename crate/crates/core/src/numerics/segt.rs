//! SEGT tensor files: one JSON header line followed by a raw little-endian
//! row-major payload.
//!
//! ```text
//! {"magic":"SEGT1","dtype":"f64","shape":[2,8,8,2]}\n<payload bytes>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "SEGT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Payload of a SEGT file in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum SegtData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegtArray {
    pub shape: Vec<usize>,
    pub data: SegtData,
}

impl SegtArray {
    pub fn dtype(&self) -> Dtype {
        match self.data {
            SegtData::F32(_) => Dtype::F32,
            SegtData::F64(_) => Dtype::F64,
            SegtData::U8(_) => Dtype::U8,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            SegtData::F32(v) => v.len(),
            SegtData::F64(v) => v.len(),
            SegtData::U8(v) => v.len(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.iter().product::<usize>() != self.len() {
            return Err(Error::Format(format!(
                "payload length {} does not match shape {:?}",
                self.len(),
                self.shape
            )));
        }
        let header = Header {
            magic: MAGIC.to_string(),
            dtype: self.dtype(),
            shape: self.shape.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        match &self.data {
            SegtData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SegtData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            SegtData::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", header.magic)));
        }
        let len: usize = header.shape.iter().product();
        let payload = &bytes[nl + 1..];
        if payload.len() != len * header.dtype.width() {
            return Err(Error::Format(format!(
                "payload has {} bytes, shape {:?} of {:?} needs {}",
                payload.len(),
                header.shape,
                header.dtype,
                len * header.dtype.width()
            )));
        }
        let data = match header.dtype {
            Dtype::F32 => SegtData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => SegtData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => SegtData::U8(payload.to_vec()),
        };
        Ok(Self {
            shape: header.shape,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    /// Widens any stored dtype to a validated `f64` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.data {
            SegtData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            SegtData::F64(v) => v.clone(),
            SegtData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: SegtData::F64(t.data().to_vec()),
        }
    }
}
