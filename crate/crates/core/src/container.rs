//! The `RCLP` parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "RCLP"            4 bytes
//! version u32              4
//! count   u32              4
//! count × entry:
//!   name_len u32, name (UTF-8), dtype u8, rank u32, shape u64 × rank, offset u64
//! payload: f64 LE values; each entry's offset is relative to the payload start
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RCLP";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
pub const HEADER_LEN: usize = 12;

fn entry_len(name: &str, rank: usize) -> usize {
    4 + name.len() + 1 + 4 + 8 * rank + 8
}

/// Exact byte size of the encoded container.
pub fn encoded_len(params: &BTreeMap<String, Tensor>) -> usize {
    HEADER_LEN
        + params.iter().map(|(n, t)| entry_len(n, t.rank())).sum::<usize>()
        + 8 * params.values().map(Tensor::len).sum::<usize>()
}

pub fn encode(params: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.len() as u64;
    }
    for t in params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container(format!("truncated entry table at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Container(format!(
            "version mismatch: file has {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Container("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Container(format!("unknown dtype tag {dtype} for `{name}`")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::Container(format!("zero extent in shape of `{name}`")));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Container(format!("shape of `{name}` overflows")))?;
        let offset = r.u64()? as usize;
        entries.push(Entry {
            name,
            shape,
            offset,
            count,
        });
    }
    let payload = &bytes[r.pos..];
    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for e in &entries {
        let end = e
            .count
            .checked_mul(8)
            .and_then(|n| e.offset.checked_add(n))
            .ok_or_else(|| Error::Container(format!("offset of `{}` overflows", e.name)))?;
        if end > payload.len() {
            return Err(Error::Container(format!(
                "truncated payload: `{}` needs bytes {}..{end}, payload has {}",
                e.name,
                e.offset,
                payload.len()
            )));
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Container(format!("entries `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    let mut out = BTreeMap::new();
    for e in entries {
        let data = payload[e.offset..e.offset + 8 * e.count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape, data)?;
        if out.insert(e.name.clone(), t).is_some() {
            return Err(Error::Container(format!("duplicate entry `{}`", e.name)));
        }
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
