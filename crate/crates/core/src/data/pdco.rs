//! PDCO binary tensor files.
//!
//! Layout: `b"PDCO"`, version `u8 = 1`, dtype `u8` (0 = f32, 1 = f64),
//! ndim `u8`, `ndim` little-endian `u32` dims, then the little-endian
//! row-major payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensorcore::Array;

pub const MAGIC: &[u8; 4] = b"PDCO";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum PdcoError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn encode(a: &Array, dtype: Dtype) -> Vec<u8> {
    let shape = a.shape();
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + a.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in a.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn need(bytes: &[u8], needed: usize) -> Result<(), PdcoError> {
    if bytes.len() < needed {
        return Err(PdcoError::Truncated { needed, have: bytes.len() });
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<(Array, Dtype), PdcoError> {
    need(bytes, 7)?;
    if &bytes[..4] != MAGIC {
        return Err(PdcoError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(PdcoError::BadVersion(bytes[4]));
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(PdcoError::BadDtype(other)),
    };
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    need(bytes, header)?;
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let total = header + count * dtype.width();
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(PdcoError::Trailing(bytes.len() - total));
    }
    let payload = &bytes[header..total];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
    };
    let a = Array::new(shape, data).map_err(|e| PdcoError::Invalid(e.to_string()))?;
    Ok((a, dtype))
}

pub fn write_tensor(path: &Path, a: &Array, dtype: Dtype) -> Result<(), PdcoError> {
    fs::write(path, encode(a, dtype)).map_err(|source| PdcoError::Io { path: path.display().to_string(), source })
}

pub fn read_tensor(path: &Path) -> Result<Array, PdcoError> {
    let bytes = fs::read(path).map_err(|source| PdcoError::Io { path: path.display().to_string(), source })?;
    Ok(decode(&bytes)?.0)
}
