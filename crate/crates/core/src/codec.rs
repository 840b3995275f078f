//! Little-endian byte layout helpers shared by the node formats.
//!
//! Every node may be wrapped in a salt envelope (`SALT_TAG`, 8-byte salt,
//! inner node). Envelopes are only produced by the no-recursive-identity
//! ablation; decoders strip them transparently.

use crate::error::{Error, Result};
use crate::store::NodeId;

pub(crate) const SALT_TAG: u8 = 0xFF;
const SALT_HEADER: usize = 9;

pub(crate) fn strip_salt(bytes: &[u8]) -> &[u8] {
    if bytes.first() == Some(&SALT_TAG) && bytes.len() > SALT_HEADER {
        &bytes[SALT_HEADER..]
    } else {
        bytes
    }
}

pub(crate) fn salted(salt: u64, inner: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(inner.len() + SALT_HEADER);
    out.push(SALT_TAG);
    out.extend_from_slice(&salt.to_le_bytes());
    out.extend_from_slice(inner);
    out
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_capacity(n: usize) -> Self {
        Writer {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn id(&mut self, id: &NodeId) -> &mut Self {
        self.raw(id.as_bytes())
    }

    /// u16 length prefix. Keys are capped at 1024 bytes.
    pub fn key(&mut self, k: &[u8]) -> &mut Self {
        self.u16(k.len() as u16).raw(k)
    }

    /// u32 length prefix.
    pub fn blob(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32).raw(v)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::corrupt("truncated node"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn id(&mut self) -> Result<NodeId> {
        Ok(NodeId::from_slice(self.take(32)?))
    }

    pub fn key(&mut self) -> Result<&'a [u8]> {
        let n = self.u16()? as usize;
        self.take(n)
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::corrupt("trailing bytes after node"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn salt_envelope_round_trip() {
        let inner = [1u8, 2, 3];
        let s = salted(7, &inner);
        assert_eq!(s.len(), 12);
        assert_eq!(strip_salt(&s), &inner);
        assert_eq!(strip_salt(&inner), &inner);
    }

    #[test]
    fn reader_rejects_truncation() {
        let mut w = Writer::default();
        w.blob(b"hello");
        let bytes = w.finish();
        let mut r = Reader::new(&bytes[..6]);
        assert!(r.blob().is_err());
    }
}
