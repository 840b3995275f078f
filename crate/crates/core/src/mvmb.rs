//! Multi-version Merkle B+-tree: a textbook copy-on-write B+-tree whose child
//! pointers are node digests. Its shape depends on insertion order.
//!
//! Node layouts (after an optional salt envelope):
//!
//! - leaf: `0x01`, u32 LE count, `(u16 key length, key, u32 value length,
//!   value)` per entry.
//! - internal: `0x00`, level byte (leaves are level 0), u16 LE child count,
//!   `count - 1` separators as `(u16 length, key)`, then `count` 32-byte ids.
//!   Child `i` holds keys `k` with `sep[i-1] <= k < sep[i]`.

use crate::codec::{strip_salt, Reader, Writer};
use crate::error::{Error, Result};
use crate::index::{Ctx, Edits, Entry, LeveledNodes};
use crate::store::{NodeId, Store};

const TAG_INTERNAL: u8 = 0;
const TAG_LEAF: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MvmbMeta {
    /// Maximum children per internal node.
    pub order: usize,
    /// Maximum entries per leaf.
    pub leaf_capacity: usize,
}

impl Default for MvmbMeta {
    /// Sized for roughly 1 KiB nodes with 5–15 byte keys and 256-byte values.
    fn default() -> Self {
        MvmbMeta {
            order: 24,
            leaf_capacity: 5,
        }
    }
}

impl MvmbMeta {
    /// Order `d` with leaves holding at most `d - 1` entries.
    pub fn textbook(order: usize) -> Self {
        MvmbMeta {
            order,
            leaf_capacity: order.saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 3 || self.order > u16::MAX as usize {
            return Err(Error::usage("MVMB order must be at least 3"));
        }
        if self.leaf_capacity < 2 {
            return Err(Error::usage("MVMB leaf capacity must be at least 2"));
        }
        Ok(())
    }

    fn min_children(&self) -> usize {
        self.order.div_ceil(2)
    }

    fn min_entries(&self) -> usize {
        self.leaf_capacity.div_ceil(2)
    }
}

#[derive(Debug)]
enum Node {
    Leaf(Vec<Entry>),
    Internal {
        level: u8,
        seps: Vec<Vec<u8>>,
        kids: Vec<NodeId>,
    },
}

fn encode_leaf(entries: &[Entry]) -> Vec<u8> {
    let mut w = Writer::with_capacity(5 + entries.iter().map(|e| 6 + e.key.len() + e.value.len()).sum::<usize>());
    w.u8(TAG_LEAF).u32(entries.len() as u32);
    for e in entries {
        w.key(&e.key).blob(&e.value);
    }
    w.finish()
}

fn encode_internal(level: u8, seps: &[Vec<u8>], kids: &[NodeId]) -> Vec<u8> {
    debug_assert_eq!(seps.len() + 1, kids.len());
    let mut w = Writer::with_capacity(4 + 34 * kids.len() + seps.iter().map(Vec::len).sum::<usize>());
    w.u8(TAG_INTERNAL).u8(level).u16(kids.len() as u16);
    for s in seps {
        w.key(s);
    }
    for k in kids {
        w.id(k);
    }
    w.finish()
}

fn decode(bytes: &[u8]) -> Result<Node> {
    let mut r = Reader::new(strip_salt(bytes));
    let node = match r.u8()? {
        TAG_LEAF => {
            let n = r.u32()? as usize;
            let mut v = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let k = r.key()?.to_vec();
                v.push(Entry::new(k, r.blob()?.to_vec()));
            }
            Node::Leaf(v)
        }
        TAG_INTERNAL => {
            let level = r.u8()?;
            let n = r.u16()? as usize;
            if level == 0 || n == 0 {
                return Err(Error::corrupt("malformed MVMB internal node"));
            }
            let seps = (0..n - 1).map(|_| r.key().map(<[u8]>::to_vec)).collect::<Result<_>>()?;
            let kids = (0..n).map(|_| r.id()).collect::<Result<_>>()?;
            Node::Internal { level, seps, kids }
        }
        t => return Err(Error::corrupt(format!("unknown MVMB tag {t}"))),
    };
    r.finish()?;
    Ok(node)
}

pub(crate) struct MvmbNodes;

impl LeveledNodes for MvmbNodes {
    fn level(bytes: &[u8]) -> Result<u8> {
        Ok(match decode(bytes)? {
            Node::Leaf(_) => 0,
            Node::Internal { level, .. } => level,
        })
    }

    fn children(bytes: &[u8]) -> Result<Vec<NodeId>> {
        children(bytes)
    }

    fn leaf_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
        match decode(bytes)? {
            Node::Leaf(v) => Ok(v),
            Node::Internal { .. } => Err(Error::corrupt("expected MVMB leaf")),
        }
    }
}

pub(crate) fn children(bytes: &[u8]) -> Result<Vec<NodeId>> {
    Ok(match decode(bytes)? {
        Node::Leaf(_) => Vec::new(),
        Node::Internal { kids, .. } => kids,
    })
}

pub(crate) fn rewrite_children(bytes: &[u8], ids: &[NodeId]) -> Result<Vec<u8>> {
    match decode(bytes)? {
        Node::Leaf(_) => Ok(strip_salt(bytes).to_vec()),
        Node::Internal { level, seps, kids } => {
            if kids.len() != ids.len() {
                return Err(Error::usage("child id count mismatch"));
            }
            Ok(encode_internal(level, &seps, ids))
        }
    }
}

fn child_index(seps: &[Vec<u8>], key: &[u8]) -> usize {
    seps.partition_point(|s| s.as_slice() <= key)
}

pub(crate) fn lookup(ctx: &mut Ctx, root: Option<NodeId>, key: &[u8]) -> Result<Option<Vec<u8>>> {
    let Some(mut id) = root else {
        return Ok(None);
    };
    loop {
        match decode(&ctx.load(&id)?)? {
            Node::Leaf(v) => {
                return Ok(v
                    .binary_search_by(|e| e.key.as_slice().cmp(key))
                    .ok()
                    .map(|i| v[i].value.clone()))
            }
            Node::Internal { seps, kids, .. } => id = kids[child_index(&seps, key)],
        }
    }
}

enum Work {
    Stored(NodeId),
    Leaf(Vec<Entry>),
    Internal {
        level: u8,
        seps: Vec<Vec<u8>>,
        kids: Vec<Work>,
    },
}

impl Work {
    fn resolve(&mut self, ctx: &mut Ctx) -> Result<()> {
        if let Work::Stored(id) = self {
            *self = match decode(&ctx.load(id)?)? {
                Node::Leaf(v) => Work::Leaf(v),
                Node::Internal { level, seps, kids } => Work::Internal {
                    level,
                    seps,
                    kids: kids.into_iter().map(Work::Stored).collect(),
                },
            };
        }
        Ok(())
    }

    fn len(&self) -> usize {
        match self {
            Work::Leaf(v) => v.len(),
            Work::Internal { kids, .. } => kids.len(),
            Work::Stored(_) => unreachable!("resolved"),
        }
    }
}

fn insert(
    ctx: &mut Ctx,
    meta: &MvmbMeta,
    w: &mut Work,
    key: &[u8],
    value: &[u8],
) -> Result<Option<(Vec<u8>, Work)>> {
    w.resolve(ctx)?;
    match w {
        Work::Leaf(v) => {
            match v.binary_search_by(|e| e.key.as_slice().cmp(key)) {
                Ok(i) => v[i].value = value.to_vec(),
                Err(i) => v.insert(i, Entry::new(key, value)),
            }
            if v.len() <= meta.leaf_capacity {
                return Ok(None);
            }
            let right = v.split_off(v.len().div_ceil(2));
            Ok(Some((right[0].key.clone(), Work::Leaf(right))))
        }
        Work::Internal { level, seps, kids } => {
            let i = child_index(seps, key);
            let Some((sep, right)) = insert(ctx, meta, &mut kids[i], key, value)? else {
                return Ok(None);
            };
            seps.insert(i, sep);
            kids.insert(i + 1, right);
            if kids.len() <= meta.order {
                return Ok(None);
            }
            let mid = kids.len().div_ceil(2);
            let right_kids = kids.split_off(mid);
            let right_seps = seps.split_off(mid);
            let up = seps.pop().expect("separator between halves");
            Ok(Some((
                up,
                Work::Internal {
                    level: *level,
                    seps: right_seps,
                    kids: right_kids,
                },
            )))
        }
        Work::Stored(_) => unreachable!("resolved"),
    }
}

fn underflows(meta: &MvmbMeta, w: &Work) -> bool {
    match w {
        Work::Leaf(v) => v.len() < meta.min_entries(),
        Work::Internal { kids, .. } => kids.len() < meta.min_children(),
        Work::Stored(_) => false,
    }
}

fn remove(ctx: &mut Ctx, meta: &MvmbMeta, w: &mut Work, key: &[u8]) -> Result<bool> {
    w.resolve(ctx)?;
    match w {
        Work::Leaf(v) => match v.binary_search_by(|e| e.key.as_slice().cmp(key)) {
            Ok(i) => {
                v.remove(i);
                Ok(true)
            }
            Err(_) => Ok(false),
        },
        Work::Internal { seps, kids, .. } => {
            let i = child_index(seps, key);
            if !remove(ctx, meta, &mut kids[i], key)? {
                return Ok(false);
            }
            if underflows(meta, &kids[i]) {
                rebalance(ctx, meta, seps, kids, i)?;
            }
            Ok(true)
        }
        Work::Stored(_) => unreachable!("resolved"),
    }
}

/// Restores occupancy of `kids[i]` by borrowing from or merging with a
/// sibling, preferring the left one.
fn rebalance(
    ctx: &mut Ctx,
    meta: &MvmbMeta,
    seps: &mut Vec<Vec<u8>>,
    kids: &mut Vec<Work>,
    i: usize,
) -> Result<()> {
    let j = if i > 0 { i - 1 } else { i + 1 };
    if j >= kids.len() {
        return Ok(());
    }
    kids[j].resolve(ctx)?;
    let min = match &kids[j] {
        Work::Leaf(_) => meta.min_entries(),
        _ => meta.min_children(),
    };
    let (l, r) = if j < i { (j, i) } else { (i, j) };
    let (left_part, right_part) = kids.split_at_mut(r);
    let (left, right) = (&mut left_part[l], &mut right_part[0]);
    if kids_len_gt(if j < i { &*left } else { &*right }, min) {
        match (left, right) {
            (Work::Leaf(a), Work::Leaf(b)) => {
                if j < i {
                    b.insert(0, a.pop().unwrap());
                } else {
                    a.push(b.remove(0));
                }
                seps[l] = b[0].key.clone();
            }
            (
                Work::Internal {
                    seps: sa, kids: ka, ..
                },
                Work::Internal {
                    seps: sb, kids: kb, ..
                },
            ) => {
                if j < i {
                    kb.insert(0, ka.pop().unwrap());
                    sb.insert(0, std::mem::replace(&mut seps[l], sa.pop().unwrap()));
                } else {
                    ka.push(kb.remove(0));
                    sa.push(std::mem::replace(&mut seps[l], sb.remove(0)));
                }
            }
            _ => return Err(Error::corrupt("MVMB siblings at different levels")),
        }
        return Ok(());
    }
    let right = kids.remove(r);
    let sep = seps.remove(l);
    match (&mut kids[l], right) {
        (Work::Leaf(a), Work::Leaf(b)) => a.extend(b),
        (
            Work::Internal {
                seps: sa, kids: ka, ..
            },
            Work::Internal {
                seps: sb, kids: kb, ..
            },
        ) => {
            sa.push(sep);
            sa.extend(sb);
            ka.extend(kb);
        }
        _ => return Err(Error::corrupt("MVMB siblings at different levels")),
    }
    Ok(())
}

fn kids_len_gt(w: &Work, min: usize) -> bool {
    w.len() > min
}

fn commit(ctx: &mut Ctx, w: Work) -> NodeId {
    match w {
        Work::Stored(id) => id,
        Work::Leaf(v) => ctx.put(encode_leaf(&v)),
        Work::Internal { level, seps, kids } => {
            let ids: Vec<NodeId> = kids.into_iter().map(|k| commit(ctx, k)).collect();
            ctx.put(encode_internal(level, &seps, &ids))
        }
    }
}

fn level_of(w: &Work) -> u8 {
    match w {
        Work::Leaf(_) => 0,
        Work::Internal { level, .. } => *level,
        Work::Stored(_) => unreachable!("resolved"),
    }
}

pub(crate) fn apply(
    ctx: &mut Ctx,
    root: Option<NodeId>,
    meta: &MvmbMeta,
    edits: &Edits,
) -> Result<Option<NodeId>> {
    let mut work = root.map(Work::Stored);
    for (key, value) in edits {
        match value {
            Some(v) => {
                let mut w = work.take().unwrap_or(Work::Leaf(Vec::new()));
                if let Some((sep, right)) = insert(ctx, meta, &mut w, key, v)? {
                    let level = level_of(&w) + 1;
                    w = Work::Internal {
                        level,
                        seps: vec![sep],
                        kids: vec![w, right],
                    };
                }
                work = Some(w);
            }
            None => {
                let Some(mut w) = work.take() else {
                    continue;
                };
                remove(ctx, meta, &mut w, key)?;
                // Shrink a root left with a single child.
                loop {
                    match w {
                        Work::Internal { mut kids, .. } if kids.len() == 1 => {
                            w = kids.pop().unwrap();
                            w.resolve(ctx)?;
                        }
                        other => {
                            w = other;
                            break;
                        }
                    }
                }
                work = match w {
                    Work::Leaf(v) if v.is_empty() => None,
                    w => Some(w),
                };
            }
        }
    }
    Ok(work.map(|w| commit(ctx, w)))
}

pub(crate) fn entries(ctx: &mut Ctx, root: Option<NodeId>) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    let mut stack: Vec<NodeId> = root.into_iter().collect();
    while let Some(id) = stack.pop() {
        match decode(&ctx.load(&id)?)? {
            Node::Leaf(v) => out.extend(v),
            Node::Internal { kids, .. } => stack.extend(kids.into_iter().rev()),
        }
    }
    Ok(out)
}

pub(crate) fn prove(ctx: &mut Ctx, root: Option<NodeId>, key: &[u8]) -> Result<Vec<Vec<u8>>> {
    let mut id = root.ok_or(Error::Absent)?;
    let mut nodes = Vec::new();
    loop {
        let bytes = ctx.load(&id)?;
        nodes.push(bytes.to_vec());
        match decode(&bytes)? {
            Node::Leaf(v) => {
                return match v.binary_search_by(|e| e.key.as_slice().cmp(key)) {
                    Ok(_) => Ok(nodes),
                    Err(_) => Err(Error::Absent),
                }
            }
            Node::Internal { seps, kids, .. } => id = kids[child_index(&seps, key)],
        }
    }
}

pub(crate) fn verify_path(key: &[u8], value: &[u8], nodes: &[Vec<u8>]) -> bool {
    let mut expected_level: Option<u8> = None;
    for (i, bytes) in nodes.iter().enumerate() {
        match decode(bytes) {
            Ok(Node::Leaf(v)) => {
                return expected_level.is_none_or(|l| l == 0)
                    && i + 1 == nodes.len()
                    && v.iter().any(|e| e.key == key && e.value == value)
            }
            Ok(Node::Internal { level, seps, kids }) => {
                if expected_level.is_some_and(|l| l != level) {
                    return false;
                }
                match nodes.get(i + 1) {
                    Some(next) if NodeId::of(next) == kids[child_index(&seps, key)] => {}
                    _ => return false,
                }
                expected_level = Some(level - 1);
            }
            Err(_) => return false,
        }
    }
    false
}

/// Checks occupancy bounds, separator order and uniform leaf depth.
pub fn check_invariants(store: &Store, root: Option<NodeId>, meta: &MvmbMeta) -> Result<()> {
    fn walk(
        store: &Store,
        id: NodeId,
        meta: &MvmbMeta,
        is_root: bool,
        lo: Option<&[u8]>,
        hi: Option<&[u8]>,
    ) -> Result<u8> {
        let bytes = store.get(&id).ok_or(Error::Dangling(id))?;
        let bad = |m: &str| Err(Error::corrupt(format!("MVMB invariant: {m}")));
        match decode(&bytes)? {
            Node::Leaf(v) => {
                if v.len() > meta.leaf_capacity || (!is_root && v.len() < meta.min_entries()) || v.is_empty() {
                    return bad("leaf occupancy");
                }
                if v.windows(2).any(|w| w[0].key >= w[1].key) {
                    return bad("leaf order");
                }
                let first = v[0].key.as_slice();
                let last = v[v.len() - 1].key.as_slice();
                if lo.is_some_and(|lo| first < lo) || hi.is_some_and(|hi| last >= hi) {
                    return bad("leaf key outside separator range");
                }
                Ok(0)
            }
            Node::Internal { level, seps, kids } => {
                let min = if is_root { 2 } else { meta.min_children() };
                if kids.len() > meta.order || kids.len() < min {
                    return bad("internal occupancy");
                }
                if seps.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("separator order");
                }
                for (i, k) in kids.iter().enumerate() {
                    let clo = if i == 0 { lo } else { Some(seps[i - 1].as_slice()) };
                    let chi = if i == seps.len() { hi } else { Some(seps[i].as_slice()) };
                    if walk(store, *k, meta, false, clo, chi)? + 1 != level {
                        return bad("non-uniform depth");
                    }
                }
                Ok(level)
            }
        }
    }
    match root {
        None => Ok(()),
        Some(r) => walk(store, r, meta, true, None, None).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{Meta, RootHandle};

    fn key(i: u32) -> Vec<u8> {
        format!("k{i:04}").into_bytes()
    }

    #[test]
    fn insertion_order_changes_shape() {
        let s = Store::new();
        let meta = MvmbMeta::textbook(4);
        let empty = RootHandle::empty(&s, Meta::Mvmb(meta)).unwrap();
        let mut asc = empty.clone();
        for i in 0..16 {
            asc = asc.insert(&s, &key(i), b"v").unwrap();
        }
        let mut desc = empty;
        for i in (0..16).rev() {
            desc = desc.insert(&s, &key(i), b"v").unwrap();
        }
        check_invariants(&s, asc.root(), &meta).unwrap();
        check_invariants(&s, desc.root(), &meta).unwrap();
        assert_eq!(asc.entries(&s).unwrap(), desc.entries(&s).unwrap());
        assert_ne!(asc.root(), desc.root());
    }

    #[test]
    fn removals_keep_invariants() {
        let s = Store::new();
        let meta = MvmbMeta::textbook(4);
        let mut h = RootHandle::empty(&s, Meta::Mvmb(meta)).unwrap();
        for i in 0..200 {
            h = h.insert(&s, &key((i * 37) % 200), b"v").unwrap();
            check_invariants(&s, h.root(), &meta).unwrap();
        }
        for i in 0..200 {
            h = h.remove(&s, &key((i * 53) % 200)).unwrap();
            check_invariants(&s, h.root(), &meta).unwrap();
            assert_eq!(h.lookup(&s, &key((i * 53) % 200)).unwrap(), None);
        }
        assert_eq!(h.root(), None);
    }

    #[test]
    fn absent_remove_keeps_root() {
        let s = Store::new();
        let mut h = RootHandle::empty(&s, Meta::Mvmb(MvmbMeta::textbook(4))).unwrap();
        for i in 0..30 {
            h = h.insert(&s, &key(i), b"v").unwrap();
        }
        let (h2, st) = h.remove_traced(&s, b"zzz").unwrap();
        assert_eq!(h2.root(), h.root());
        assert_eq!(st.created, 0);
    }
}
