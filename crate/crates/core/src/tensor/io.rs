//! GMFV1 raw tensor files.
//!
//! Layout: the 8-byte magic `GMFV\0\x01\0\0`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, a `u8` dtype tag, then packed
//! little-endian data. Tags: 0 = f32, 1 = f64, 2 = u8 (pixel values on a
//! 0..=255 scale, read back divided by 255 unless read raw).
//!
//! Containers (saved models) are plain concatenations of records; the first
//! record is a u8 tensor holding a UTF-8 manifest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const MAGIC: [u8; 8] = *b"GMFV\x00\x01\x00\x00";
const MAX_RANK: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }
}

fn bad(reason: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, reason.into())
}

/// Write one record. `U8` rounds and clamps `value·255`.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| bad("extent exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[dtype.tag()])?;
    match dtype {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        DType::U8 => {
            let bytes: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            w.write_all(&bytes)?;
        }
    }
    Ok(())
}

/// Write raw bytes as a rank-1 u8 record (no scaling).
pub fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(&[DType::U8.tag()])?;
    w.write_all(bytes)
}

enum Payload {
    Values(Tensor),
    Bytes(Vec<usize>, Vec<u8>),
}

fn read_record<R: Read>(r: &mut R) -> std::io::Result<(DType, Payload)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("element count overflows"))?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0]).ok_or_else(|| bad(format!("unknown dtype tag {}", tag[0])))?;
    let width = match dtype {
        DType::F64 => 8,
        DType::F32 => 4,
        DType::U8 => 1,
    };
    let mut raw = Vec::new();
    r.take((n * width) as u64).read_to_end(&mut raw)?;
    if raw.len() != n * width {
        return Err(bad("truncated data"));
    }
    let payload = match dtype {
        DType::F64 => Payload::Values(Tensor {
            shape,
            data: raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        }),
        DType::F32 => Payload::Values(Tensor {
            shape,
            data: raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        }),
        DType::U8 => Payload::Bytes(shape, raw),
    };
    Ok((dtype, payload))
}

/// Read one record; u8 data is rescaled to `[0, 1]`.
pub fn read_tensor<R: Read>(r: &mut R) -> std::io::Result<(Tensor, DType)> {
    let (dtype, payload) = read_record(r)?;
    let t = match payload {
        Payload::Values(t) => t,
        Payload::Bytes(shape, raw) => Tensor {
            shape,
            data: raw.iter().map(|&b| b as f64 / 255.0).collect(),
        },
    };
    Ok((t, dtype))
}

/// Read one u8 record verbatim.
pub fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    match read_record(r)? {
        (_, Payload::Bytes(_, raw)) => Ok(raw),
        _ => Err(bad("expected a u8 record")),
    }
}

pub fn save(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t, dtype)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_tensor(&mut r).map(|(t, _)| t).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData | std::io::ErrorKind::UnexpectedEof => Error::format(path, e.to_string()),
        _ => Error::io(path, e),
    })
}
