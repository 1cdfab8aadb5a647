//! `UCKP` version 1 parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UCKP"  u32 version  u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u8 dtype (0 = f32), u32 rank,
//!             rank × u64 dims, raw f32 data
//! u32 CRC-32 of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;
use unicon_core::ParamStore;

pub const MAGIC: &[u8; 4] = b"UCKP";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint CRC mismatch over bytes 0..{covered}: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32, covered: usize },
    #[error("not a UCKP checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(
        "checkpoint tensors do not match the model: {} missing{}, {} unexpected{}",
        missing.len(), preview(missing), unexpected.len(), preview(unexpected)
    )]
    NameMismatch { missing: Vec<String>, unexpected: Vec<String> },
    #[error("tensor `{name}` has shape {found:?} in the checkpoint, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

fn preview(names: &[String]) -> String {
    const SHOWN: usize = 4;
    if names.is_empty() {
        return String::new();
    }
    let head = names.iter().take(SHOWN).map(String::as_str).collect::<Vec<_>>().join(", ");
    let more = if names.len() > SHOWN { ", ..." } else { "" };
    format!(" ({head}{more})")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes every parameter of `store` in registration order.
pub fn encode(store: &ParamStore) -> Vec<u8> {
    let count = store.iter().count();
    let mut out = Vec::with_capacity(12 + 4 * store.total_elements() + 64 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("record runs past byte {}", self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Verifies the CRC, magic and version, then parses every record.
pub fn decode(bytes: &[u8]) -> Result<Vec<TensorRecord>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Crc {
            stored: 0,
            computed: crc32fast::hash(bytes),
            covered: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc {
            stored,
            computed,
            covered: body.len(),
        });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Malformed(format!("`{name}` has unknown dtype code {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` shape {shape:?} overflows")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(records)
}

/// Copies `records` into `store`, which must hold exactly the same names
/// with the same shapes.
pub fn apply_records(store: &mut ParamStore, records: Vec<TensorRecord>) -> Result<(), CheckpointError> {
    let mut by_name: HashMap<String, TensorRecord> = HashMap::with_capacity(records.len());
    let mut unexpected = Vec::new();
    for rec in records {
        if store.find(&rec.name).is_none() {
            unexpected.push(rec.name);
        } else {
            by_name.insert(rec.name.clone(), rec);
        }
    }
    let missing: Vec<String> = store
        .iter()
        .filter(|(_, p)| !by_name.contains_key(&p.name))
        .map(|(_, p)| p.name.clone())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(CheckpointError::NameMismatch { missing, unexpected });
    }
    for (_, p) in store.iter() {
        let rec = &by_name[&p.name];
        if rec.shape != p.shape {
            return Err(CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.shape.clone(),
                found: rec.shape.clone(),
            });
        }
    }
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let rec = by_name.remove(&name).expect("checked above");
        store.set_value(id, rec.data).expect("shape checked");
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<(), CheckpointError> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let bytes = fs::read(path)?;
    apply_records(store, decode(&bytes)?)
}
