//! Self-describing little-endian tensor container.
//!
//! ```text
//! offset  size        field
//! 0       8           magic  "BEVTNSR\0"
//! 8       1           dtype  (0 = fp32, 1 = fp16)
//! 9       1           rank   (0..=4)
//! 10      4 * rank    dims, u32 each
//! ...     n * width   payload, row-major
//! ```

use std::fs;
use std::path::Path;

use half::f16;
use ndarray::{ArrayBase, ArrayD, Data, Dimension, IxDyn};
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"BEVTNSR\0";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F16 = 1,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, ContainerError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F16),
            other => Err(ContainerError::UnknownDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: not a tensor container")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("rank {0} exceeds the maximum of {MAX_RANK}")]
    RankTooLarge(usize),
    #[error("dimension {0} does not fit in 32 bits")]
    DimTooLarge(usize),
    #[error("truncated container: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Size in bytes of the payload section for a tensor of `shape`.
pub fn payload_len(shape: &[usize], dtype: Dtype) -> usize {
    shape.iter().product::<usize>() * dtype.width()
}

pub fn header_len(rank: usize) -> usize {
    MAGIC.len() + 2 + 4 * rank
}

pub fn encode_tensor<S, D>(tensor: &ArrayBase<S, D>, dtype: Dtype) -> Result<Vec<u8>, ContainerError>
where
    S: Data<Elem = f32>,
    D: Dimension,
{
    let shape = tensor.shape();
    if shape.len() > MAX_RANK {
        return Err(ContainerError::RankTooLarge(shape.len()));
    }
    let mut out = Vec::with_capacity(header_len(shape.len()) + payload_len(shape, dtype));
    out.extend_from_slice(&MAGIC);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &d in shape {
        let d32 = u32::try_from(d).map_err(|_| ContainerError::DimTooLarge(d))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    // `iter` walks in logical row-major order regardless of memory layout.
    match dtype {
        Dtype::F32 => tensor.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F16 => tensor
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
    }
    Ok(out)
}

/// Decodes a container; fp16 payloads are widened to `f32`.
pub fn decode_tensor(bytes: &[u8]) -> Result<(ArrayD<f32>, Dtype), ContainerError> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(ContainerError::Truncated { expected: MAGIC.len() + 2, found: bytes.len() });
        }
        return Err(ContainerError::BadMagic);
    }
    if bytes[..MAGIC.len()] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 2 {
        return Err(ContainerError::Truncated { expected: MAGIC.len() + 2, found: bytes.len() });
    }
    let dtype = Dtype::from_code(bytes[8])?;
    let rank = bytes[9] as usize;
    if rank > MAX_RANK {
        return Err(ContainerError::RankTooLarge(rank));
    }
    let header = header_len(rank);
    if bytes.len() < header {
        return Err(ContainerError::Truncated { expected: header, found: bytes.len() });
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = header + payload_len(&shape, dtype);
    if bytes.len() < expected {
        return Err(ContainerError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(ContainerError::TrailingBytes(bytes.len() - expected));
    }
    let payload = &bytes[header..];
    let data: Vec<f32> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    };
    let array = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked against shape");
    Ok((array, dtype))
}

pub fn write_tensor<S, D>(path: impl AsRef<Path>, tensor: &ArrayBase<S, D>) -> Result<(), ContainerError>
where
    S: Data<Elem = f32>,
    D: Dimension,
{
    fs::write(path, encode_tensor(tensor, Dtype::F32)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f32>, ContainerError> {
    let bytes = fs::read(path)?;
    Ok(decode_tensor(&bytes)?.0)
}
