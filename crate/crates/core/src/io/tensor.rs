//! The `.msvf` dense tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                          |
//! |--------------|--------------------------------|
//! | 4            | magic `MSVF`                   |
//! | 4            | version, `u32` = 1             |
//! | 1            | dtype, `u8` = 1 (float32)      |
//! | 4            | rank, `u32`                    |
//! | 4 × rank     | dims, `u32` each               |
//! | 4 × Π dims   | payload, row-major `f32`       |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MSVF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// Header size for a tensor of the given rank.
pub const fn header_len(rank: usize) -> usize {
    13 + 4 * rank
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        validate(&shape, &values)?;
        Ok(Self { shape, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn validate(shape: &[usize], values: &[f32]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::dim("tensor rank must be at least 1"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::dim(format!("dimension {axis} is zero")));
    }
    if shape.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::dim("dimension does not fit in u32"));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim("element count overflows"))?;
    if count != values.len() {
        return Err(Error::dim(format!(
            "shape {shape:?} holds {count} values, got {}",
            values.len()
        )));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

pub fn encode_tensor(shape: &[usize], values: &[f32]) -> Result<Vec<u8>> {
    validate(shape, values)?;
    let mut out = Vec::with_capacity(header_len(shape.len()) + 4 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &dim in shape {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the header, returning the shape and the header length in bytes.
/// `total_len` is the full file length, used for truncation reports.
fn decode_header(bytes: &[u8], total_len: u64) -> Result<(Vec<usize>, usize)> {
    let truncated = |expected: u64| Error::Truncated {
        expected,
        actual: total_len,
    };
    if bytes.len() < header_len(0) {
        return Err(truncated(header_len(0) as u64));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[8]));
    }
    let rank = word(9) as usize;
    let header = header_len(rank);
    if bytes.len() < header {
        return Err(truncated(header as u64));
    }
    let shape = (0..rank).map(|i| word(13 + 4 * i) as usize).collect();
    Ok((shape, header))
}

fn payload_len(shape: &[usize]) -> Result<u64> {
    shape
        .iter()
        .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| Error::dim("element count overflows"))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let total = bytes.len() as u64;
    let (shape, header) = decode_header(bytes, total)?;
    let expected = header as u64 + payload_len(&shape)?;
    if total != expected {
        return Err(Error::Truncated {
            expected,
            actual: total,
        });
    }
    let values: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, values)
}

pub fn write_tensor(path: impl AsRef<Path>, shape: &[usize], values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(shape, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Reads only the header and returns the shape, checking that the file
/// length matches the declared payload.
pub fn read_tensor_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    use std::io::Read;
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let total = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = Vec::new();
    file.take(header_len(64) as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    let (shape, header) = decode_header(&head, total)?;
    let expected = header as u64 + payload_len(&shape)?;
    if total != expected {
        return Err(Error::Truncated {
            expected,
            actual: total,
        });
    }
    Ok(shape)
}
