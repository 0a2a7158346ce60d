//! MDN1 binary checkpoints.
//!
//! Little-endian: magic `MDN1`, then records of
//! `u32 name length, UTF-8 name, u32 rank, u32 dims[rank], f64 payload[Π dims]`.

use std::fs;
use std::path::Path;

use crate::engine::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDN1";

pub fn encode<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing MDN1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Writes every store entry (parameters and buffers) followed by `extra` records.
pub fn save(store: &ParamStore, extra: &[(String, Tensor)], path: &Path) -> Result<()> {
    let records = store
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
    fs::write(path, encode(records))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Copies records into a store whose entries were created with the same names and shapes.
/// Records whose names start with `meta.` are skipped.
pub fn load_into(store: &mut ParamStore, records: &[(String, Tensor)]) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in records {
        if name.starts_with("meta.") {
            continue;
        }
        let id = store
            .lookup(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has unknown tensor {name:?}")))?;
        let dst = store.value_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{name}: checkpoint shape {:?} vs model {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t.clone();
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &store.iter().nth(i).expect("index in range").1.name;
        return Err(Error::Format(format!("checkpoint is missing {name:?}")));
    }
    Ok(())
}

pub fn find<'a>(records: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}
