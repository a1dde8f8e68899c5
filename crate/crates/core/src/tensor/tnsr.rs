//! `TNSR` binary container.
//!
//! Layout: magic `SKTN`, version byte `0x01`, dtype byte (`0x00` float32,
//! `0x01` uint8), ndim byte, `ndim` little-endian u32 dims, then the
//! row-major little-endian payload. No compression.

use std::fs;
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SKTN";
pub const VERSION: u8 = 0x01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0x00,
            DType::U8 => 0x01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TnsrFile {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl TnsrFile {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            payload: Payload::F32(data),
        }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            shape,
            payload: Payload::U8(data),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let n: usize = self.shape.iter().product();
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err("missing SKTN magic".into());
        }
        if bytes[4] != VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let dtype = match bytes[5] {
            0x00 => DType::F32,
            0x01 => DType::U8,
            other => return Err(format!("unknown dtype byte {other:#04x}")),
        };
        let ndim = bytes[6] as usize;
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let shape: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let body = &bytes[header..];
        let payload = match dtype {
            DType::F32 => {
                if body.len() != 4 * n {
                    return Err(format!("expected {} payload bytes, found {}", 4 * n, body.len()));
                }
                Payload::F32(
                    body.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            DType::U8 => {
                if body.len() != n {
                    return Err(format!("expected {n} payload bytes, found {}", body.len()));
                }
                Payload::U8(body.to_vec())
            }
        };
        Ok(Self { shape, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|d| Error::format(path, d))
    }

    pub fn into_f32(self, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.payload {
            Payload::F32(v) => Ok((self.shape, v)),
            Payload::U8(_) => Err(Error::format(path, "expected float32 payload, found uint8")),
        }
    }

    pub fn into_u8(self, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.payload {
            Payload::U8(v) => Ok((self.shape, v)),
            Payload::F32(_) => Err(Error::format(path, "expected uint8 payload, found float32")),
        }
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    TnsrFile::f32(t.shape().to_vec(), t.data().iter().map(|&v| v as f32).collect()).write(path)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (shape, data) = TnsrFile::read(path)?.into_f32(path)?;
    Tensor::new(shape, data.into_iter().map(|v| v as Float).collect())
}
