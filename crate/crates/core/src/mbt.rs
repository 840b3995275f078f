//! Merkle Bucket Tree: records hashed into a fixed number of buckets, with a
//! complete m-ary Merkle tree over the bucket digests.
//!
//! Node layouts (after an optional salt envelope):
//!
//! - internal: `0x00`, u16 LE child count, 32-byte child ids.
//! - bucket: `0x01`, u32 LE entry count, then `(u16 key length, key, u32 value
//!   length, value)` sorted by key.
//!
//! Bucket `b` sits under the root along the base-m digits of `b`, most
//! significant first, over `depth` levels. When `buckets` is not a power of
//! the fanout the rightmost internal nodes are partial.

use crate::codec::{strip_salt, Reader, Writer};
use crate::error::{Error, Result};
use crate::index::{Ctx, DiffResult, Edits, Entry};
use crate::store::NodeId;

use sha2::{Digest, Sha256};

const TAG_INTERNAL: u8 = 0;
const TAG_BUCKET: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MbtMeta {
    pub buckets: usize,
    pub fanout: usize,
}

impl Default for MbtMeta {
    fn default() -> Self {
        MbtMeta {
            buckets: 1024,
            fanout: 4,
        }
    }
}

impl MbtMeta {
    pub fn new(buckets: usize, fanout: usize) -> Self {
        MbtMeta { buckets, fanout }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buckets == 0 || self.buckets > u32::MAX as usize {
            return Err(Error::usage("MBT bucket count must be positive"));
        }
        if self.fanout < 2 || self.fanout > u16::MAX as usize {
            return Err(Error::usage("MBT fanout must be at least 2"));
        }
        Ok(())
    }

    /// Number of internal levels above the buckets.
    pub fn depth(&self) -> usize {
        let mut d = 0;
        let mut span = 1usize;
        while span < self.buckets {
            span = span.saturating_mul(self.fanout);
            d += 1;
        }
        d
    }

    /// Internal node count of the complete tree; buckets are extra.
    pub fn internal_nodes(&self) -> usize {
        let mut total = 0;
        let mut width = self.buckets;
        while width > 1 {
            width = width.div_ceil(self.fanout);
            total += width;
        }
        total
    }

    /// Child indices from the root down to `bucket`.
    pub fn path_to(&self, bucket: usize) -> Vec<usize> {
        let d = self.depth();
        let mut digits = vec![0; d];
        let mut b = bucket;
        for slot in digits.iter_mut().rev() {
            *slot = b % self.fanout;
            b /= self.fanout;
        }
        digits
    }

    fn span(&self, level_from_bottom: usize) -> usize {
        self.fanout.saturating_pow(level_from_bottom as u32)
    }
}

pub fn bucket_of(key: &[u8], buckets: usize) -> usize {
    let h = Sha256::digest(key);
    let x = u64::from_be_bytes(h[..8].try_into().unwrap());
    (x % buckets as u64) as usize
}

enum Node {
    Internal(Vec<NodeId>),
    Bucket(Vec<Entry>),
}

fn encode_internal(ids: &[NodeId]) -> Vec<u8> {
    let mut w = Writer::with_capacity(3 + 32 * ids.len());
    w.u8(TAG_INTERNAL).u16(ids.len() as u16);
    for id in ids {
        w.id(id);
    }
    w.finish()
}

fn encode_bucket(entries: &[Entry]) -> Vec<u8> {
    let mut w = Writer::with_capacity(5 + entries.iter().map(|e| 6 + e.key.len() + e.value.len()).sum::<usize>());
    w.u8(TAG_BUCKET).u32(entries.len() as u32);
    for e in entries {
        w.key(&e.key).blob(&e.value);
    }
    w.finish()
}

fn decode(bytes: &[u8]) -> Result<Node> {
    let mut r = Reader::new(strip_salt(bytes));
    let node = match r.u8()? {
        TAG_INTERNAL => {
            let n = r.u16()? as usize;
            Node::Internal((0..n).map(|_| r.id()).collect::<Result<_>>()?)
        }
        TAG_BUCKET => {
            let n = r.u32()? as usize;
            let mut v = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let k = r.key()?.to_vec();
                v.push(Entry::new(k, r.blob()?.to_vec()));
            }
            Node::Bucket(v)
        }
        t => return Err(Error::corrupt(format!("unknown MBT tag {t}"))),
    };
    r.finish()?;
    Ok(node)
}

fn load_internal(ctx: &mut Ctx, id: &NodeId) -> Result<Vec<NodeId>> {
    match decode(&ctx.load(id)?)? {
        Node::Internal(ids) => Ok(ids),
        Node::Bucket(_) => Err(Error::corrupt("bucket where internal node expected")),
    }
}

fn load_bucket(ctx: &mut Ctx, id: &NodeId) -> Result<Vec<Entry>> {
    match decode(&ctx.load(id)?)? {
        Node::Bucket(v) => Ok(v),
        Node::Internal(_) => Err(Error::corrupt("internal node where bucket expected")),
    }
}

pub(crate) fn children(bytes: &[u8]) -> Result<Vec<NodeId>> {
    Ok(match decode(bytes)? {
        Node::Internal(ids) => ids,
        Node::Bucket(_) => Vec::new(),
    })
}

pub(crate) fn rewrite_children(bytes: &[u8], ids: &[NodeId]) -> Result<Vec<u8>> {
    Ok(match decode(bytes)? {
        Node::Internal(old) => {
            if old.len() != ids.len() {
                return Err(Error::usage("child id count mismatch"));
            }
            encode_internal(ids)
        }
        Node::Bucket(_) => strip_salt(bytes).to_vec(),
    })
}

/// Builds the all-empty tree.
pub(crate) fn empty(ctx: &mut Ctx, meta: &MbtMeta) -> NodeId {
    let bucket = ctx.put(encode_bucket(&[]));
    build_empty(ctx, meta, meta.depth(), 0, bucket)
}

fn build_empty(ctx: &mut Ctx, meta: &MbtMeta, level: usize, first: usize, bucket: NodeId) -> NodeId {
    if level == 0 {
        return bucket;
    }
    let span = meta.span(level - 1);
    let ids: Vec<NodeId> = (0..meta.fanout)
        .map(|i| first + i * span)
        .filter(|&start| start < meta.buckets)
        .map(|start| build_empty(ctx, meta, level - 1, start, bucket))
        .collect();
    ctx.put(encode_internal(&ids))
}

pub(crate) fn lookup(
    ctx: &mut Ctx,
    root: Option<NodeId>,
    meta: &MbtMeta,
    key: &[u8],
) -> Result<Option<Vec<u8>>> {
    let mut cur = root.ok_or_else(|| Error::corrupt("MBT without root"))?;
    for digit in meta.path_to(bucket_of(key, meta.buckets)) {
        let ids = load_internal(ctx, &cur)?;
        cur = *ids.get(digit).ok_or_else(|| Error::corrupt("MBT path out of range"))?;
    }
    let bucket = load_bucket(ctx, &cur)?;
    Ok(bucket
        .binary_search_by(|e| e.key.as_slice().cmp(key))
        .ok()
        .map(|i| bucket[i].value.clone()))
}

fn apply_bucket(mut entries: Vec<Entry>, edits: &[(&Vec<u8>, &Option<Vec<u8>>)]) -> Vec<Entry> {
    for (k, v) in edits {
        match (entries.binary_search_by(|e| e.key.cmp(k)), v) {
            (Ok(i), Some(v)) => entries[i].value = v.clone(),
            (Ok(i), None) => {
                entries.remove(i);
            }
            (Err(i), Some(v)) => entries.insert(i, Entry::new((*k).clone(), v.clone())),
            (Err(_), None) => {}
        }
    }
    entries
}

type BucketEdits<'a> = Vec<(usize, Vec<(&'a Vec<u8>, &'a Option<Vec<u8>>)>)>;

fn update(
    ctx: &mut Ctx,
    meta: &MbtMeta,
    id: NodeId,
    level: usize,
    first: usize,
    edits: &[(usize, Vec<(&Vec<u8>, &Option<Vec<u8>>)>)],
) -> Result<NodeId> {
    if level == 0 {
        let entries = load_bucket(ctx, &id)?;
        return Ok(ctx.put(encode_bucket(&apply_bucket(entries, &edits[0].1))));
    }
    let mut ids = load_internal(ctx, &id)?;
    let span = meta.span(level - 1);
    let mut rest = edits;
    while let Some((b, _)) = rest.first() {
        let slot = (b - first) / span;
        let end = rest.partition_point(|(x, _)| (x - first) / span == slot);
        let child = *ids.get(slot).ok_or_else(|| Error::corrupt("MBT path out of range"))?;
        ids[slot] = update(ctx, meta, child, level - 1, first + slot * span, &rest[..end])?;
        rest = &rest[end..];
    }
    Ok(ctx.put(encode_internal(&ids)))
}

pub(crate) fn apply(
    ctx: &mut Ctx,
    root: Option<NodeId>,
    meta: &MbtMeta,
    edits: &Edits,
) -> Result<NodeId> {
    let root = root.ok_or_else(|| Error::corrupt("MBT without root"))?;
    let mut by_bucket: std::collections::BTreeMap<usize, Vec<_>> = Default::default();
    for (k, v) in edits {
        by_bucket.entry(bucket_of(k, meta.buckets)).or_default().push((k, v));
    }
    let grouped: BucketEdits = by_bucket.into_iter().collect();
    update(ctx, meta, root, meta.depth(), 0, &grouped)
}

pub(crate) fn entries(ctx: &mut Ctx, root: Option<NodeId>) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut stack: Vec<NodeId> = root.into_iter().collect();
    while let Some(id) = stack.pop() {
        match decode(&ctx.load(&id)?)? {
            Node::Internal(ids) => stack.extend(ids.into_iter().rev()),
            Node::Bucket(v) => out.extend(v),
        }
    }
    Ok(out)
}

fn diff_rec(ctx: &mut Ctx, a: NodeId, b: NodeId, out: &mut DiffResult) -> Result<()> {
    if a == b {
        return Ok(());
    }
    match (decode(&ctx.load(&a)?)?, decode(&ctx.load(&b)?)?) {
        (Node::Internal(x), Node::Internal(y)) if x.len() == y.len() => {
            for (ca, cb) in x.into_iter().zip(y) {
                diff_rec(ctx, ca, cb, out)?;
            }
            Ok(())
        }
        (Node::Bucket(x), Node::Bucket(y)) => {
            out.push_sorted(x, y);
            Ok(())
        }
        _ => Err(Error::corrupt("MBT shapes differ")),
    }
}

pub(crate) fn diff(
    ctx: &mut Ctx,
    a: Option<NodeId>,
    b: Option<NodeId>,
    out: &mut DiffResult,
) -> Result<()> {
    match (a, b) {
        (Some(a), Some(b)) => diff_rec(ctx, a, b, out),
        _ => Err(Error::corrupt("MBT without root")),
    }
}

pub(crate) fn prove(
    ctx: &mut Ctx,
    root: Option<NodeId>,
    meta: &MbtMeta,
    key: &[u8],
) -> Result<Vec<Vec<u8>>> {
    let mut cur = root.ok_or(Error::Absent)?;
    let mut nodes = Vec::new();
    for digit in meta.path_to(bucket_of(key, meta.buckets)) {
        let bytes = ctx.load(&cur)?;
        nodes.push(bytes.to_vec());
        cur = match decode(&bytes)? {
            Node::Internal(ids) => *ids.get(digit).ok_or_else(|| Error::corrupt("MBT path out of range"))?,
            Node::Bucket(_) => return Err(Error::corrupt("bucket above leaf level")),
        };
    }
    let bytes = ctx.load(&cur)?;
    match decode(&bytes)? {
        Node::Bucket(v) if v.binary_search_by(|e| e.key.as_slice().cmp(key)).is_ok() => {
            nodes.push(bytes.to_vec());
            Ok(nodes)
        }
        _ => Err(Error::Absent),
    }
}

pub(crate) fn verify_path(meta: &MbtMeta, key: &[u8], value: &[u8], nodes: &[Vec<u8>]) -> bool {
    let path = meta.path_to(bucket_of(key, meta.buckets));
    if nodes.len() != path.len() + 1 {
        return false;
    }
    for (i, digit) in path.iter().enumerate() {
        match decode(&nodes[i]) {
            Ok(Node::Internal(ids)) if ids.get(*digit) == Some(&NodeId::of(&nodes[i + 1])) => {}
            _ => return false,
        }
    }
    match decode(nodes.last().unwrap()) {
        Ok(Node::Bucket(v)) => v.iter().any(|e| e.key == key && e.value == value),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{Meta, RootHandle};
    use crate::store::Store;

    #[test]
    fn path_digits() {
        assert_eq!(MbtMeta::new(16, 4).path_to(7), vec![1, 3]);
        assert_eq!(MbtMeta::new(16, 4).depth(), 2);
        assert_eq!(MbtMeta::new(1, 4).depth(), 0);
        assert_eq!(MbtMeta::new(10, 3).path_to(9), vec![1, 0, 0]);
    }

    #[test]
    fn internal_node_counts() {
        assert_eq!(MbtMeta::new(8, 2).internal_nodes(), 7);
        assert_eq!(MbtMeta::new(81, 3).internal_nodes(), 40);
        assert_eq!(MbtMeta::new(1024, 4).internal_nodes(), 341);
    }

    fn count_internal(s: &Store, id: NodeId) -> usize {
        match decode(&s.get(&id).unwrap()).unwrap() {
            Node::Internal(ids) => 1 + ids.iter().map(|c| count_internal(s, *c)).sum::<usize>(),
            Node::Bucket(_) => 0,
        }
    }

    #[test]
    fn materialized_shape_matches_counts() {
        for (b, m) in [(8, 2), (81, 3), (10, 3), (1, 2), (100, 4)] {
            let meta = MbtMeta::new(b, m);
            let s = Store::new();
            let h = RootHandle::empty(&s, Meta::Mbt(meta)).unwrap();
            assert_eq!(count_internal(&s, h.root().unwrap()), meta.internal_nodes(), "B={b} m={m}");
        }
    }

    #[test]
    fn lookup_visits_depth_plus_one() {
        let s = Store::new();
        let h = RootHandle::empty(&s, Meta::Mbt(MbtMeta::new(64, 4)))
            .unwrap()
            .insert(&s, b"k", b"v")
            .unwrap();
        let (v, st) = h.lookup_traced(&s, b"k").unwrap();
        assert_eq!(v.as_deref(), Some(&b"v"[..]));
        assert_eq!(st.visits, 4);
    }
}
