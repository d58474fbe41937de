//! PTNS single-tensor and PTAR archive binary formats.
//!
//! PTNS: `b"PTNS"`, u16 LE version (1), u8 dtype (0 = f32, 1 = f64), u8 rank,
//! rank × u64 LE dims, row-major LE payload.
//!
//! PTAR: `b"PTAR"`, u32 LE entry count, then per entry a u16 LE name length,
//! the UTF-8 name and an embedded PTNS blob.

use std::path::Path;

use super::Tensor;
use crate::real::DType;
use crate::{Error, Real, Result};

pub const PTNS_MAGIC: [u8; 4] = *b"PTNS";
pub const PTAR_MAGIC: [u8; 4] = *b"PTAR";
pub const PTNS_VERSION: u16 = 1;

pub fn encode_ptns<F: Real>(t: &Tensor<F>, out: &mut Vec<u8>) -> Result<()> {
    if t.dims().len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.dims().len())));
    }
    out.extend_from_slice(&PTNS_MAGIC);
    out.extend_from_slice(&PTNS_VERSION.to_le_bytes());
    out.push(F::DTYPE as u8);
    out.push(t.dims().len() as u8);
    for d in t.dims() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_ptns_at<F: Real>(cur: &mut Cursor<'_>) -> Result<Tensor<F>> {
    if cur.take(4)? != PTNS_MAGIC {
        return Err(Error::Format("bad PTNS magic".into()));
    }
    let version = cur.u16()?;
    if version != PTNS_VERSION {
        return Err(Error::Format(format!("unsupported PTNS version {version}")));
    }
    let code = cur.u8()?;
    let dtype =
        DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype {code}")))?;
    let rank = cur.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(usize::try_from(cur.u64()?).map_err(|_| Error::Format("dim overflow".into()))?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let bytes = cur.take(
        n.checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload overflow".into()))?,
    )?;
    let data: Vec<F> = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| F::c(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| F::c(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(dims, data)
}

/// Decode one PTNS blob; values are converted to `F` if the stored dtype
/// differs.
pub fn decode_ptns<F: Real>(buf: &[u8]) -> Result<Tensor<F>> {
    let mut cur = Cursor { buf, pos: 0 };
    let t = decode_ptns_at(&mut cur)?;
    if cur.pos != buf.len() {
        return Err(Error::Format("trailing bytes after PTNS payload".into()));
    }
    Ok(t)
}

pub fn encode_ptar<F: Real>(entries: &[(String, &Tensor<F>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&PTAR_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        encode_ptns(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_ptar<F: Real>(buf: &[u8]) -> Result<Vec<(String, Tensor<F>)>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != PTAR_MAGIC {
        return Err(Error::Format("bad PTAR magic".into()));
    }
    let n = cur.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        out.push((name, decode_ptns_at(&mut cur)?));
    }
    if cur.pos != buf.len() {
        return Err(Error::Format("trailing bytes after PTAR entries".into()));
    }
    Ok(out)
}

pub fn write_ptar<F: Real>(path: &Path, entries: &[(String, &Tensor<F>)]) -> Result<()> {
    let bytes = encode_ptar(entries)?;
    write_bytes(path, &bytes)
}

pub fn read_ptar<F: Real>(path: &Path) -> Result<Vec<(String, Tensor<F>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ptar(&bytes)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
