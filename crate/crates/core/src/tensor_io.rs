//! Raw little-endian tensor files.
//!
//! Layout: the magic bytes `SPTN`, a `u16` version, a `u16` rank, `rank`
//! dimensions as `u32`, then the row-major payload. Version 1 carries `f32`
//! elements (rasters, depth, features); version 2 carries `f64` elements and
//! is used for weight tensors so that trained values round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPTN";
pub const VERSION_F32: u16 = 1;
pub const VERSION_F64: u16 = 2;

const MAX_RANK: u16 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl RawTensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        RawTensor { dims, payload: Payload::F32(data) }
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        RawTensor { dims, payload: Payload::F64(data) }
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Payload widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    pub fn into_f32(self, context: &str) -> Result<Vec<f32>> {
        match self.payload {
            Payload::F32(v) => Ok(v),
            Payload::F64(_) => Err(Error::MalformedHeader {
                context: context.to_string(),
                reason: "expected a 32-bit float tensor (version 1)".into(),
            }),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let version = match self.payload {
            Payload::F32(_) => VERSION_F32,
            Payload::F64(_) => VERSION_F64,
        };
        w.write_u16::<LittleEndian>(version)?;
        w.write_u16::<LittleEndian>(self.dims.len() as u16)?;
        for &d in &self.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        match &self.payload {
            Payload::F32(v) => {
                for &x in v {
                    w.write_f32::<LittleEndian>(x)?;
                }
            }
            Payload::F64(v) => {
                for &x in v {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
        }
        Ok(())
    }

    /// Reads one tensor record. `context` names the source in error messages.
    pub fn read_from<R: Read>(r: &mut R, context: &str) -> Result<Self> {
        let malformed = |reason: String| Error::MalformedHeader {
            context: context.to_string(),
            reason,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| malformed(format!("truncated magic: {e}")))?;
        if &magic != MAGIC {
            return Err(malformed(format!("bad magic {magic:?}")));
        }
        let version = r
            .read_u16::<LittleEndian>()
            .map_err(|e| malformed(format!("truncated version: {e}")))?;
        let rank = r
            .read_u16::<LittleEndian>()
            .map_err(|e| malformed(format!("truncated rank: {e}")))?;
        if rank > MAX_RANK {
            return Err(malformed(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = r
                .read_u32::<LittleEndian>()
                .map_err(|e| malformed(format!("truncated dims: {e}")))?;
            dims.push(d as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed("element count overflows".into()))?;
        let payload = match version {
            VERSION_F32 => {
                let mut v = vec![0f32; count];
                r.read_f32_into::<LittleEndian>(&mut v)
                    .map_err(|e| malformed(format!("truncated payload: {e}")))?;
                Payload::F32(v)
            }
            VERSION_F64 => {
                let mut v = vec![0f64; count];
                r.read_f64_into::<LittleEndian>(&mut v)
                    .map_err(|e| malformed(format!("truncated payload: {e}")))?;
                Payload::F64(v)
            }
            other => return Err(malformed(format!("unsupported version {other}"))),
        };
        Ok(RawTensor { dims, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let t = Self::read_from(&mut r, &path.display().to_string())?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::MalformedHeader {
                context: path.display().to_string(),
                reason: "trailing bytes after payload".into(),
            });
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = RawTensor::f32(vec![2, 1], vec![1.0, -2.5]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"SPTN");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..8], &[2, 0]);
        assert_eq!(&buf[8..12], &[2, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[1, 0, 0, 0]);
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = RawTensor::f64(vec![3], vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = RawTensor::read_from(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back, t);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            RawTensor::read_from(&mut bad.as_slice(), "mem"),
            Err(Error::MalformedHeader { .. })
        ));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            RawTensor::read_from(&mut &short[..], "mem"),
            Err(Error::MalformedHeader { .. })
        ));
    }
}
