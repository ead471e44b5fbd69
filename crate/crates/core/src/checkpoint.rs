//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UDAC1"                      magic + format version
//! u32 record_count
//! record_count x {
//!     u32 name_len, name bytes (UTF-8)
//!     u32 rank, rank x u64 dims
//!     prod(dims) x f64
//! }
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, UdacError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"UDAC1";

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(UdacError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(UdacError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Split `bytes` into payload and verified CRC32 trailer.
pub(crate) fn verify_crc(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(UdacError::Truncated("checksum"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(UdacError::Checksum { stored, computed });
    }
    Ok(payload)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() {
        return Err(UdacError::Truncated("magic"));
    }
    if &bytes[..4] != b"UDAC" {
        return Err(UdacError::BadMagic { expected: "UDAC1" });
    }
    if bytes[4] != MAGIC[4] {
        return Err(UdacError::Version(String::from_utf8_lossy(&bytes[..5]).into_owned()));
    }
    let payload = verify_crc(bytes)?;
    let mut r = Reader::new(payload);
    r.take(MAGIC.len(), "magic")?;
    let count = r.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| UdacError::invalid(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(UdacError::Truncated("tensor payload"));
        }
        let data = (0..n).map(|_| r.f64("tensor payload")).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(UdacError::invalid(format!(
            "{} trailing bytes after records",
            r.remaining()
        )));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(records))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Look up a record by name.
pub fn find<'a>(records: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| UdacError::MissingParam(name.to_owned()))
}
