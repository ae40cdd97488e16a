//! Binary checkpoint format: the magic bytes `FBN1`, then one record per
//! tensor until end of file. A record is the name length (u32 LE), the UTF-8
//! name, the rank (u32 LE), each dimension (u32 LE) and the values as
//! little-endian `f32`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBN1";

/// Writes tensors in map order (sorted by name), so equal maps serialize to
/// equal bytes.
pub fn write_checkpoint<T: Scalar, W: Write>(
    out: &mut W,
    tensors: &BTreeMap<String, Tensor<T>>,
) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(input: &mut R) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing FBN1 magic".into(),
        });
    }
    let mut out = BTreeMap::new();
    while cur.pos < bytes.len() {
        let record_start = cur.pos;
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Parse {
                offset: record_start + 4,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Parse {
            offset: record_start,
            message: format!("tensor {name}: {e}"),
        })?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::Parse {
                offset: record_start,
                message: format!("duplicate tensor {name}"),
            });
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
