//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FGCK"
//! u32     format version (currently 1)
//! u32     entry count
//! entry*  u16 name length, name bytes (UTF-8)
//!         u8  rank, then rank x u32 dimensions
//!         f64 x prod(dims) payload (IEEE-754 bit patterns, LE)
//! ```
//!
//! Entries appear in the order given to the writer; readers preserve it.
//! Values round-trip bit-exactly because payloads are raw bit patterns.
//! The parser never trusts a length field without checking it against the
//! remaining input, so truncated or hostile inputs fail cleanly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::Cursor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FGCK";
const VERSION: u32 = 1;
/// Caps a single tensor at 2^28 elements (2 GiB of f64) to bound
/// allocation on malformed input.
const MAX_ELEMS: u64 = 1 << 28;
const MAX_RANK: u8 = 8;

/// Serializes named tensors into the container format.
pub fn encode(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

/// Parses the container format. Rejects bad magic, unknown versions,
/// truncation, oversized shapes, duplicate names, and trailing bytes.
pub fn parse(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor::new("checkpoint", bytes);
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", format!("entry {i}: name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(
                "checkpoint",
                format!("duplicate entry name {name:?}"),
            ));
        }
        let rank = cur.u8()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                "checkpoint",
                format!("entry {name:?}: rank {rank} outside 1..={MAX_RANK}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = cur.u32()? as u64;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= MAX_ELEMS)
                .ok_or_else(|| {
                    Error::format("checkpoint", format!("entry {name:?}: shape overflows"))
                })?;
            shape.push(d as usize);
        }
        let data = cur.f64_vec(numel as usize)?;
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    cur.finish()?;
    Ok(entries)
}

pub fn write_file(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(entries))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    parse(&std::fs::read(path)?)
}
