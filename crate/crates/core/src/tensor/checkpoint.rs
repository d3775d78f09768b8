//! `RMF1` checkpoints.
//!
//! Layout (little-endian): magic `RMF1`, u32 entry count, then one manifest
//! record per entry (u16 name length, UTF-8 name, u8 dtype with 0 = f32 and
//! 1 = f64, u8 rank, rank × u32 dims), and finally the raw buffers of every
//! entry concatenated in manifest order.

use std::fs;
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const MAGIC: &[u8; 4] = b"RMF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn encode<T: Scalar>(entries: &[CheckpointEntry<T>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.code());
        out.push(e.tensor.shape().len() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for e in entries {
        for &v in e.tensor.data() {
            match T::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Decodes any stored dtype into `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<CheckpointEntry<T>>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not an RMF1 checkpoint".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = usize::from(r.u16()?);
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("checkpoint name is not UTF-8".into()))?
            .to_owned();
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(Error::Data(format!("unknown dtype code {c} for `{name}`"))),
        };
        let rank = usize::from(r.u8()?);
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, dtype, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, dtype, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.width())?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        entries.push(CheckpointEntry { name, tensor: Tensor::new(&shape, data)? });
    }
    if r.remaining() != 0 {
        return Err(Error::Data(format!("{} trailing bytes after checkpoint payload", r.remaining())));
    }
    Ok(entries)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, entries: &[CheckpointEntry<T>]) -> Result<()> {
    let bytes = encode(entries)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<CheckpointEntry<T>>> {
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_cross_precision() {
        let entries = vec![
            CheckpointEntry { name: "a.weight".into(), tensor: Tensor::new(&[2, 3], vec![1.0f32, -2.5, 3.25, 0.0, 1e-7, 9.0]).unwrap() },
            CheckpointEntry { name: "b".into(), tensor: Tensor::scalar(0.125f32) },
        ];
        let bytes = encode(&entries).unwrap();
        assert_eq!(&bytes[..4], b"RMF1");
        assert_eq!(decode::<f32>(&bytes).unwrap(), entries);
        let wide = decode::<f64>(&bytes).unwrap();
        assert_eq!(wide[0].tensor.data()[1], -2.5);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
