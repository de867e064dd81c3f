//! KTEN binary tensor records.
//!
//! Layout (little-endian, no padding):
//! `"KTEN"` · version `u32` = 1 · rank `u32` · rank × dim `u32` · payload f64.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const KTEN_MAGIC: &[u8; 4] = b"KTEN";
pub const KTEN_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    out.write_all(KTEN_MAGIC)?;
    out.write_all(&KTEN_VERSION.to_le_bytes())?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(tensor.numel() * 8);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn tensor_to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, tensor).expect("writing to a Vec cannot fail");
    buf
}

/// Cursor over an in-memory byte buffer that reports truncation offsets.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.offset(),
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.remaining()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn tensor(&mut self) -> Result<Tensor> {
        self.magic(KTEN_MAGIC)?;
        let version = self.u32("tensor version")?;
        if version != KTEN_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "KTEN",
                found: version,
                expected: KTEN_VERSION,
            });
        }
        let rank_at = self.offset();
        let rank = self.u32("tensor rank")? as usize;
        if rank > 16 {
            return Err(Error::Format {
                offset: rank_at,
                message: format!("implausible tensor rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.offset();
            let d = self.u32("tensor dim")? as usize;
            if d == 0 {
                return Err(Error::Format {
                    offset: at,
                    message: "zero tensor extent".into(),
                });
            }
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format {
                offset: self.offset(),
                message: format!("tensor shape {shape:?} overflows"),
            })?;
        let payload = self.take(n * 8, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }
}

/// Decodes exactly one KTEN record; trailing bytes are an error.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    let t = r.tensor()?;
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset(),
            message: format!("{} trailing bytes after tensor", r.remaining()),
        });
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(tensor)).map_err(|e| Error::file(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    tensor_from_bytes(&bytes)
}
