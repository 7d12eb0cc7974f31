//! Little-endian byte cursor shared by the serialized-artifact parsers.
//!
//! Every read is bounds-checked against the remaining input and reports
//! the artifact kind and offset on failure, so truncated or hostile
//! inputs fail cleanly before any allocation is sized from them.

use crate::error::{Error, Result};

pub(crate) struct Cursor<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(kind: &'static str, bytes: &'a [u8]) -> Cursor<'a> {
        Cursor { kind, bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.kind,
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads `n` little-endian f64 bit patterns.
    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let payload = self.take(n * 8)?;
        Ok(payload
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect())
    }

    /// Rejects trailing bytes after the last expected field.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
