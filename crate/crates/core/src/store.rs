//! Content-addressed, append-only node store.
//!
//! Nodes are immutable byte strings named by their SHA-256 digest. Putting the
//! same bytes twice is a no-op, which is what lets every index version share
//! unchanged nodes with its predecessors.
//!
//! Snapshot layout: `"SIRI"`, version byte `0x01`, then records of
//! `(u32 LE length, payload)` in insertion order. A zero-length record
//! terminates the stream and is followed by the SHA-256 of all record ids
//! concatenated in order, so a flipped payload byte is reported as a digest
//! mismatch on load.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::RwLock;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SIRI";
const FORMAT_VERSION: u8 = 0x01;

/// SHA-256 digest naming a stored node.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId([u8; 32]);

impl NodeId {
    pub fn of(bytes: &[u8]) -> Self {
        NodeId(Sha256::digest(bytes).into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        NodeId(bytes)
    }

    pub(crate) fn from_slice(bytes: &[u8]) -> Self {
        NodeId(bytes.try_into().expect("32-byte digest"))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub node_count: u64,
    pub total_bytes: u64,
}

#[derive(Default)]
struct Inner {
    nodes: IndexMap<NodeId, Arc<[u8]>>,
    total_bytes: u64,
}

/// In-memory node store. Readers may run concurrently; writers serialize on
/// an internal lock.
#[derive(Default)]
pub struct Store {
    inner: RwLock<Inner>,
    next_salt: AtomicU64,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `bytes` and returns their digest. Idempotent.
    pub fn put(&self, bytes: &[u8]) -> Result<NodeId> {
        if bytes.is_empty() {
            return Err(Error::usage("cannot store an empty node"));
        }
        Ok(self.insert(bytes.to_vec()).0)
    }

    /// Returns the id and whether the node was new to the store.
    pub(crate) fn insert(&self, bytes: Vec<u8>) -> (NodeId, bool) {
        debug_assert!(!bytes.is_empty());
        let id = NodeId::of(&bytes);
        if self.inner.read().nodes.contains_key(&id) {
            return (id, false);
        }
        let mut inner = self.inner.write();
        if inner.nodes.contains_key(&id) {
            return (id, false);
        }
        inner.total_bytes += bytes.len() as u64;
        inner.nodes.insert(id, bytes.into());
        (id, true)
    }

    pub fn get(&self, id: &NodeId) -> Option<Arc<[u8]>> {
        self.inner.read().nodes.get(id).cloned()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.inner.read().nodes.contains_key(id)
    }

    pub fn stats(&self) -> StoreStats {
        let inner = self.inner.read();
        StoreStats {
            node_count: inner.nodes.len() as u64,
            total_bytes: inner.total_bytes,
        }
    }

    /// Fresh salt for the no-recursive-identity ablation. Unique per store.
    pub(crate) fn next_salt(&self) -> u64 {
        self.next_salt.fetch_add(1, Ordering::Relaxed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let inner = self.inner.read();
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&[FORMAT_VERSION])?;
        let mut manifest = Sha256::new();
        for (id, bytes) in &inner.nodes {
            out.write_all(&(bytes.len() as u32).to_le_bytes())?;
            out.write_all(bytes)?;
            manifest.update(id.as_bytes());
        }
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&manifest.finalize())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Store> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Self::decode_snapshot(&buf)
    }

    fn decode_snapshot(buf: &[u8]) -> Result<Store> {
        if buf.len() < 5 || &buf[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if buf[4] != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", buf[4])));
        }
        let store = Store::new();
        let mut manifest = Sha256::new();
        let mut pos = 5;
        loop {
            let len_bytes = buf
                .get(pos..pos + 4)
                .ok_or_else(|| Error::Format(format!("truncated record header at {pos}")))?;
            let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            pos += 4;
            if len == 0 {
                break;
            }
            let payload = buf
                .get(pos..pos + len)
                .ok_or_else(|| Error::Format(format!("truncated record at {}", pos - 4)))?;
            pos += len;
            let (id, _) = store.insert(payload.to_vec());
            manifest.update(id.as_bytes());
        }
        let recorded = buf
            .get(pos..pos + 32)
            .ok_or_else(|| Error::Format("missing digest trailer".into()))?;
        if pos + 32 != buf.len() {
            return Err(Error::Format("trailing bytes after digest".into()));
        }
        if manifest.finalize().as_slice() != recorded {
            return Err(Error::Format("digest mismatch: node payloads altered".into()));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_is_idempotent() {
        let s = Store::new();
        let a = s.put(b"node").unwrap();
        let st = s.stats();
        assert_eq!(s.put(b"node").unwrap(), a);
        assert_eq!(s.stats(), st);
    }

    #[test]
    fn digest_of_abc() {
        let s = Store::new();
        let id = s.put(b"abc").unwrap();
        assert_eq!(
            id.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn stats_accumulate() {
        let s = Store::new();
        assert_eq!(s.stats(), StoreStats::default());
        s.put(&[1u8; 100]).unwrap();
        assert_eq!(
            s.stats(),
            StoreStats {
                node_count: 1,
                total_bytes: 100
            }
        );
        s.put(&[2u8; 50]).unwrap();
        assert_eq!(
            s.stats(),
            StoreStats {
                node_count: 2,
                total_bytes: 150
            }
        );
    }

    #[test]
    fn get_round_trip_and_missing() {
        let s = Store::new();
        let id = s.put(b"payload").unwrap();
        assert_eq!(&*s.get(&id).unwrap(), b"payload");
        assert!(s.get(&NodeId::of(b"other")).is_none());
    }

    #[test]
    fn empty_put_is_usage_error() {
        assert!(matches!(Store::new().put(b""), Err(Error::Usage(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let s = Store::new();
        let ids: Vec<_> = (0..20u8).map(|i| s.put(&vec![i; 10 + i as usize]).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.siri");
        s.save(&path).unwrap();
        let t = Store::load(&path).unwrap();
        assert_eq!(t.stats(), s.stats());
        for id in ids {
            assert_eq!(t.get(&id), s.get(&id));
        }
    }

    #[test]
    fn snapshot_rejects_damage() {
        let s = Store::new();
        s.put(b"first node").unwrap();
        s.put(b"second node").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.siri");
        s.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = &bytes[..bytes.len() - 40];
        assert!(matches!(Store::decode_snapshot(truncated), Err(Error::Format(_))));

        let mut flipped = bytes.clone();
        flipped[5 + 4 + 2] ^= 0x01;
        match Store::decode_snapshot(&flipped) {
            Err(Error::Format(msg)) => assert!(msg.contains("digest mismatch")),
            other => panic!("expected digest mismatch, got {:?}", other.map(|_| ())),
        }

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Store::decode_snapshot(&magic).is_err());
    }
}
