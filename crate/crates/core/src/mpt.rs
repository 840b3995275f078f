//! Merkle Patricia Trie over the nibbles of each key.
//!
//! Node layouts (after an optional salt envelope):
//!
//! - branch: `0x00`, u16 LE occupancy bitmap, for each set bit in slot order a
//!   reference (`0x00` followed by a 32-byte id), then `0x00` or `0x01` + blob
//!   for the value bound at this prefix.
//! - leaf: `0x01`, hex-prefix path (u16 length), value blob.
//! - extension: `0x02`, hex-prefix path (u16 length), 32-byte child id.
//!
//! The layout is canonical: a branch never holds a single child without a
//! value, extensions always point at branches, and a lone value below a branch
//! is a leaf. Removal restores this shape, so any record set has exactly one
//! encoding regardless of operation order.

use std::sync::Arc;

use crate::codec::{strip_salt, Reader, Writer};
use crate::error::{Error, Result};
use crate::index::{Ctx, DiffResult, Edits, Entry};
use crate::store::NodeId;

const TAG_BRANCH: u8 = 0;
const TAG_LEAF: u8 = 1;
const TAG_EXT: u8 = 2;
const REF_HASH: u8 = 0;

pub(crate) fn nibbles(key: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(key.len() * 2);
    for b in key {
        out.push(b >> 4);
        out.push(b & 0x0f);
    }
    out
}

fn pack_nibbles(n: &[u8]) -> Vec<u8> {
    debug_assert!(n.len().is_multiple_of(2));
    n.chunks(2).map(|p| (p[0] << 4) | p[1]).collect()
}

/// Hex-prefix encoding: the first nibble is `2 * is_leaf + odd_length`; an
/// even-length path is padded with a zero nibble.
pub fn hp_encode(path: &[u8], is_leaf: bool) -> Vec<u8> {
    let odd = path.len() % 2 == 1;
    let flag = (is_leaf as u8) * 2 + odd as u8;
    let mut out = Vec::with_capacity(path.len() / 2 + 1);
    let rest = if odd {
        out.push((flag << 4) | path[0]);
        &path[1..]
    } else {
        out.push(flag << 4);
        path
    };
    for p in rest.chunks(2) {
        out.push((p[0] << 4) | p[1]);
    }
    out
}

/// Inverse of [`hp_encode`]; returns the nibble path and the leaf flag.
pub fn hp_decode(bytes: &[u8]) -> Result<(Vec<u8>, bool)> {
    let first = *bytes.first().ok_or_else(|| Error::corrupt("empty hex-prefix path"))?;
    let flag = first >> 4;
    if flag > 3 {
        return Err(Error::corrupt("bad hex-prefix flag"));
    }
    let mut path = Vec::with_capacity(bytes.len() * 2);
    if flag & 1 == 1 {
        path.push(first & 0x0f);
    } else if first & 0x0f != 0 {
        return Err(Error::corrupt("nonzero hex-prefix padding"));
    }
    for b in &bytes[1..] {
        path.push(b >> 4);
        path.push(b & 0x0f);
    }
    Ok((path, flag & 2 == 2))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Node {
    Branch {
        children: [Option<NodeId>; 16],
        value: Option<Vec<u8>>,
    },
    Leaf {
        path: Vec<u8>,
        value: Vec<u8>,
    },
    Ext {
        path: Vec<u8>,
        child: NodeId,
    },
}

fn encode(node: &Node) -> Vec<u8> {
    let mut w = Writer::with_capacity(64);
    match node {
        Node::Branch { children, value } => {
            let mut bitmap = 0u16;
            for (i, c) in children.iter().enumerate() {
                if c.is_some() {
                    bitmap |= 1 << i;
                }
            }
            w.u8(TAG_BRANCH).u16(bitmap);
            for c in children.iter().flatten() {
                w.u8(REF_HASH).id(c);
            }
            match value {
                Some(v) => w.u8(1).blob(v),
                None => w.u8(0),
            };
        }
        Node::Leaf { path, value } => {
            w.u8(TAG_LEAF).key(&hp_encode(path, true)).blob(value);
        }
        Node::Ext { path, child } => {
            w.u8(TAG_EXT).key(&hp_encode(path, false)).id(child);
        }
    }
    w.finish()
}

fn decode(bytes: &[u8]) -> Result<Node> {
    let mut r = Reader::new(strip_salt(bytes));
    let node = match r.u8()? {
        TAG_BRANCH => {
            let bitmap = r.u16()?;
            let mut children = [None; 16];
            for (i, slot) in children.iter_mut().enumerate() {
                if bitmap & (1 << i) != 0 {
                    if r.u8()? != REF_HASH {
                        return Err(Error::corrupt("unknown child reference form"));
                    }
                    *slot = Some(r.id()?);
                }
            }
            let value = match r.u8()? {
                0 => None,
                1 => Some(r.blob()?.to_vec()),
                _ => return Err(Error::corrupt("bad branch value flag")),
            };
            Node::Branch { children, value }
        }
        TAG_LEAF => {
            let (path, leaf) = hp_decode(r.key()?)?;
            if !leaf {
                return Err(Error::corrupt("leaf with extension flag"));
            }
            Node::Leaf {
                path,
                value: r.blob()?.to_vec(),
            }
        }
        TAG_EXT => {
            let (path, leaf) = hp_decode(r.key()?)?;
            if leaf || path.is_empty() {
                return Err(Error::corrupt("malformed extension"));
            }
            Node::Ext {
                path,
                child: r.id()?,
            }
        }
        t => return Err(Error::corrupt(format!("unknown MPT tag {t}"))),
    };
    r.finish()?;
    Ok(node)
}

fn load(ctx: &mut Ctx, id: &NodeId) -> Result<Node> {
    decode(&ctx.load(id)?)
}

pub(crate) fn children(bytes: &[u8]) -> Result<Vec<NodeId>> {
    Ok(match decode(bytes)? {
        Node::Branch { children, .. } => children.iter().flatten().copied().collect(),
        Node::Leaf { .. } => Vec::new(),
        Node::Ext { child, .. } => vec![child],
    })
}

pub(crate) fn rewrite_children(bytes: &[u8], ids: &[NodeId]) -> Result<Vec<u8>> {
    let mut node = decode(bytes)?;
    let mut it = ids.iter();
    match &mut node {
        Node::Branch { children, .. } => {
            for c in children.iter_mut().flatten() {
                *c = *it.next().ok_or_else(|| Error::usage("too few child ids"))?;
            }
        }
        Node::Leaf { .. } => {}
        Node::Ext { child, .. } => {
            *child = *it.next().ok_or_else(|| Error::usage("too few child ids"))?;
        }
    }
    Ok(encode(&node))
}

pub(crate) fn lookup(ctx: &mut Ctx, root: Option<NodeId>, key: &[u8]) -> Result<Option<Vec<u8>>> {
    let path = nibbles(key);
    let mut rest = &path[..];
    let mut cur = match root {
        Some(r) => r,
        None => return Ok(None),
    };
    loop {
        match load(ctx, &cur)? {
            Node::Branch { children, value } => match rest.split_first() {
                None => return Ok(value),
                Some((&n, tail)) => match children[n as usize] {
                    Some(c) => {
                        cur = c;
                        rest = tail;
                    }
                    None => return Ok(None),
                },
            },
            Node::Leaf { path, value } => {
                return Ok((path == rest).then_some(value));
            }
            Node::Ext { path, child } => {
                if !rest.starts_with(&path) {
                    return Ok(None);
                }
                rest = &rest[path.len()..];
                cur = child;
            }
        }
    }
}

/// Mutable working copy: untouched subtrees stay as ids.
enum Work {
    Stored(NodeId),
    Branch {
        children: Box<[Option<Work>; 16]>,
        value: Option<Vec<u8>>,
    },
    Leaf {
        path: Vec<u8>,
        value: Vec<u8>,
    },
    Ext {
        path: Vec<u8>,
        child: Box<Work>,
    },
}

impl Work {
    fn resolve(self, ctx: &mut Ctx) -> Result<Work> {
        match self {
            Work::Stored(id) => Ok(match load(ctx, &id)? {
                Node::Branch { children, value } => Work::Branch {
                    children: Box::new(children.map(|c| c.map(Work::Stored))),
                    value,
                },
                Node::Leaf { path, value } => Work::Leaf { path, value },
                Node::Ext { path, child } => Work::Ext {
                    path,
                    child: Box::new(Work::Stored(child)),
                },
            }),
            w => Ok(w),
        }
    }
}

fn empty_children() -> Box<[Option<Work>; 16]> {
    Box::default()
}

fn common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// `prefix` followed by `child`, in canonical form.
fn with_prefix(ctx: &mut Ctx, prefix: &[u8], child: Work) -> Result<Work> {
    if prefix.is_empty() {
        return Ok(child);
    }
    Ok(match child.resolve(ctx)? {
        Work::Leaf { path, value } => Work::Leaf {
            path: [prefix, &path].concat(),
            value,
        },
        Work::Ext { path, child } => Work::Ext {
            path: [prefix, &path].concat(),
            child,
        },
        branch => Work::Ext {
            path: prefix.to_vec(),
            child: Box::new(branch),
        },
    })
}

fn insert(ctx: &mut Ctx, node: Option<Work>, path: &[u8], value: Vec<u8>) -> Result<Work> {
    let Some(node) = node else {
        return Ok(Work::Leaf {
            path: path.to_vec(),
            value,
        });
    };
    Ok(match node.resolve(ctx)? {
        Work::Branch {
            mut children,
            value: own,
        } => match path.split_first() {
            None => Work::Branch {
                children,
                value: Some(value),
            },
            Some((&n, tail)) => {
                let slot = children[n as usize].take();
                children[n as usize] = Some(insert(ctx, slot, tail, value)?);
                Work::Branch {
                    children,
                    value: own,
                }
            }
        },
        Work::Leaf {
            path: lpath,
            value: lvalue,
        } => {
            if lpath == path {
                return Ok(Work::Leaf { path: lpath, value });
            }
            let cp = common_prefix(&lpath, path);
            let mut children = empty_children();
            let mut own = None;
            match lpath.get(cp) {
                None => own = Some(lvalue),
                Some(&n) => {
                    children[n as usize] = Some(Work::Leaf {
                        path: lpath[cp + 1..].to_vec(),
                        value: lvalue,
                    })
                }
            }
            match path.get(cp) {
                None => own = Some(value),
                Some(&n) => {
                    children[n as usize] = Some(Work::Leaf {
                        path: path[cp + 1..].to_vec(),
                        value,
                    })
                }
            }
            let branch = Work::Branch {
                children,
                value: own,
            };
            with_prefix(ctx, &path[..cp], branch)?
        }
        Work::Ext {
            path: epath,
            child,
        } => {
            let cp = common_prefix(&epath, path);
            if cp == epath.len() {
                let child = insert(ctx, Some(*child), &path[cp..], value)?;
                return Ok(Work::Ext { path: epath, child: Box::new(child) });
            }
            let mut children = empty_children();
            let ext_tail = &epath[cp + 1..];
            let old = if ext_tail.is_empty() {
                *child
            } else {
                Work::Ext {
                    path: ext_tail.to_vec(),
                    child,
                }
            };
            children[epath[cp] as usize] = Some(old);
            let mut own = None;
            match path.get(cp) {
                None => own = Some(value),
                Some(&n) => {
                    children[n as usize] = Some(Work::Leaf {
                        path: path[cp + 1..].to_vec(),
                        value,
                    })
                }
            }
            with_prefix(
                ctx,
                &path[..cp],
                Work::Branch {
                    children,
                    value: own,
                },
            )?
        }
        Work::Stored(_) => unreachable!("resolved"),
    })
}

/// Removes `path`; returns `None` when the subtree becomes empty.
fn remove(ctx: &mut Ctx, node: Work, path: &[u8]) -> Result<Option<Work>> {
    Ok(match node.resolve(ctx)? {
        Work::Branch {
            mut children,
            mut value,
        } => {
            match path.split_first() {
                None => {
                    if value.take().is_none() {
                        return Ok(Some(Work::Branch { children, value }));
                    }
                }
                Some((&n, tail)) => {
                    if let Some(c) = children[n as usize].take() {
                        children[n as usize] = remove(ctx, c, tail)?;
                    }
                }
            }
            normalize_branch(ctx, children, value)?
        }
        Work::Leaf {
            path: lpath,
            value,
        } => {
            if lpath == path {
                None
            } else {
                Some(Work::Leaf { path: lpath, value })
            }
        }
        Work::Ext {
            path: epath,
            child,
        } => {
            if !path.starts_with(&epath) {
                return Ok(Some(Work::Ext { path: epath, child }));
            }
            match remove(ctx, *child, &path[epath.len()..])? {
                None => None,
                Some(c) => Some(with_prefix(ctx, &epath, c)?),
            }
        }
        Work::Stored(_) => unreachable!("resolved"),
    })
}

fn normalize_branch(
    ctx: &mut Ctx,
    mut children: Box<[Option<Work>; 16]>,
    value: Option<Vec<u8>>,
) -> Result<Option<Work>> {
    let occupied: Vec<usize> = (0..16).filter(|&i| children[i].is_some()).collect();
    Ok(match (occupied.len(), value) {
        (0, None) => None,
        (0, Some(v)) => Some(Work::Leaf {
            path: Vec::new(),
            value: v,
        }),
        (1, None) => {
            let i = occupied[0];
            let c = children[i].take().unwrap();
            Some(with_prefix(ctx, &[i as u8], c)?)
        }
        (_, value) => Some(Work::Branch { children, value }),
    })
}

fn commit(ctx: &mut Ctx, node: Work) -> NodeId {
    let node = match node {
        Work::Stored(id) => return id,
        Work::Branch { children, value } => {
            let children = (*children).map(|c| c.map(|c| commit(ctx, c)));
            Node::Branch { children, value }
        }
        Work::Leaf { path, value } => Node::Leaf { path, value },
        Work::Ext { path, child } => Node::Ext {
            path,
            child: commit(ctx, *child),
        },
    };
    ctx.put(encode(&node))
}

pub(crate) fn apply(ctx: &mut Ctx, root: Option<NodeId>, edits: &Edits) -> Result<Option<NodeId>> {
    let mut work = root.map(Work::Stored);
    for (key, value) in edits {
        let path = nibbles(key);
        work = match value {
            Some(v) => Some(insert(ctx, work, &path, v.clone())?),
            None => match work {
                Some(w) => remove(ctx, w, &path)?,
                None => None,
            },
        };
    }
    Ok(work.map(|w| commit(ctx, w)))
}

fn collect(ctx: &mut Ctx, id: NodeId, prefix: &mut Vec<u8>, out: &mut Vec<Entry>) -> Result<()> {
    match load(ctx, &id)? {
        Node::Branch { children, value } => {
            if let Some(v) = value {
                out.push(Entry::new(pack_nibbles(prefix), v));
            }
            for (i, c) in children.iter().enumerate() {
                if let Some(c) = c {
                    prefix.push(i as u8);
                    collect(ctx, *c, prefix, out)?;
                    prefix.pop();
                }
            }
        }
        Node::Leaf { path, value } => {
            let n = prefix.len();
            prefix.extend_from_slice(&path);
            out.push(Entry::new(pack_nibbles(prefix), value));
            prefix.truncate(n);
        }
        Node::Ext { path, child } => {
            let n = prefix.len();
            prefix.extend_from_slice(&path);
            collect(ctx, child, prefix, out)?;
            prefix.truncate(n);
        }
    }
    Ok(())
}

pub(crate) fn entries(ctx: &mut Ctx, root: Option<NodeId>) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    if let Some(r) = root {
        collect(ctx, r, &mut Vec::new(), &mut out)?;
    }
    Ok(out)
}

/// A subtree seen from a position that may fall inside a compressed path.
#[derive(Clone, PartialEq)]
enum Sub {
    None,
    Id(NodeId),
    Leaf(Vec<u8>, Vec<u8>),
    Ext(Vec<u8>, NodeId),
}

struct View {
    value: Option<Vec<u8>>,
    children: Vec<Sub>,
}

fn view(ctx: &mut Ctx, sub: Sub) -> Result<View> {
    let mut children = vec![Sub::None; 16];
    let sub = match sub {
        Sub::Id(id) => match load(ctx, &id)? {
            Node::Branch {
                children: c,
                value,
            } => {
                for (i, c) in c.iter().enumerate() {
                    if let Some(c) = c {
                        children[i] = Sub::Id(*c);
                    }
                }
                return Ok(View { value, children });
            }
            Node::Leaf { path, value } => Sub::Leaf(path, value),
            Node::Ext { path, child } => Sub::Ext(path, child),
        },
        s => s,
    };
    let value = match sub {
        Sub::None | Sub::Id(_) => None,
        Sub::Leaf(path, value) => match path.split_first() {
            None => Some(value),
            Some((&n, tail)) => {
                children[n as usize] = Sub::Leaf(tail.to_vec(), value);
                None
            }
        },
        Sub::Ext(path, child) => {
            let (&n, tail) = path.split_first().expect("extension path is nonempty");
            children[n as usize] = if tail.is_empty() {
                Sub::Id(child)
            } else {
                Sub::Ext(tail.to_vec(), child)
            };
            None
        }
    };
    Ok(View { value, children })
}

fn collect_sub(ctx: &mut Ctx, sub: Sub, prefix: &mut Vec<u8>, out: &mut Vec<Entry>) -> Result<()> {
    let n = prefix.len();
    match sub {
        Sub::None => {}
        Sub::Id(id) => collect(ctx, id, prefix, out)?,
        Sub::Leaf(path, value) => {
            prefix.extend_from_slice(&path);
            out.push(Entry::new(pack_nibbles(prefix), value));
        }
        Sub::Ext(path, child) => {
            prefix.extend_from_slice(&path);
            collect(ctx, child, prefix, out)?;
        }
    }
    prefix.truncate(n);
    Ok(())
}

fn diff_rec(ctx: &mut Ctx, a: Sub, b: Sub, prefix: &mut Vec<u8>, out: &mut DiffResult) -> Result<()> {
    if a == b {
        return Ok(());
    }
    if a == Sub::None {
        return collect_sub(ctx, b, prefix, &mut out.only_in_b);
    }
    if b == Sub::None {
        return collect_sub(ctx, a, prefix, &mut out.only_in_a);
    }
    let va = view(ctx, a)?;
    let vb = view(ctx, b)?;
    match (va.value, vb.value) {
        (Some(x), None) => out.only_in_a.push(Entry::new(pack_nibbles(prefix), x)),
        (None, Some(y)) => out.only_in_b.push(Entry::new(pack_nibbles(prefix), y)),
        (Some(x), Some(y)) if x != y => out.modified.push(crate::index::Conflict {
            key: pack_nibbles(prefix),
            value_a: x,
            value_b: y,
        }),
        _ => {}
    }
    for (i, (ca, cb)) in va.children.into_iter().zip(vb.children).enumerate() {
        prefix.push(i as u8);
        diff_rec(ctx, ca, cb, prefix, out)?;
        prefix.pop();
    }
    Ok(())
}

pub(crate) fn diff(
    ctx: &mut Ctx,
    a: Option<NodeId>,
    b: Option<NodeId>,
    out: &mut DiffResult,
) -> Result<()> {
    let wrap = |r: Option<NodeId>| r.map_or(Sub::None, Sub::Id);
    diff_rec(ctx, wrap(a), wrap(b), &mut Vec::new(), out)
}

pub(crate) fn prove(ctx: &mut Ctx, root: Option<NodeId>, key: &[u8]) -> Result<Vec<Vec<u8>>> {
    let path = nibbles(key);
    let mut rest = &path[..];
    let mut cur = root.ok_or(Error::Absent)?;
    let mut nodes = Vec::new();
    loop {
        let bytes: Arc<[u8]> = ctx.load(&cur)?;
        nodes.push(bytes.to_vec());
        match decode(&bytes)? {
            Node::Branch { children, value } => match rest.split_first() {
                None if value.is_some() => return Ok(nodes),
                None => return Err(Error::Absent),
                Some((&n, tail)) => {
                    cur = children[n as usize].ok_or(Error::Absent)?;
                    rest = tail;
                }
            },
            Node::Leaf { path, .. } if path == rest => return Ok(nodes),
            Node::Leaf { .. } => return Err(Error::Absent),
            Node::Ext { path, child } => {
                if !rest.starts_with(&path) {
                    return Err(Error::Absent);
                }
                rest = &rest[path.len()..];
                cur = child;
            }
        }
    }
}

/// Walks the proof chain, checking each link digest and the final binding.
pub(crate) fn verify_path(key: &[u8], value: &[u8], nodes: &[Vec<u8>]) -> bool {
    let path = nibbles(key);
    let mut rest = &path[..];
    for (i, bytes) in nodes.iter().enumerate() {
        let Ok(node) = decode(bytes) else {
            return false;
        };
        let last = i + 1 == nodes.len();
        let next = match node {
            Node::Branch { children, value: v } => match rest.split_first() {
                None => return last && v.as_deref() == Some(value),
                Some((&n, tail)) => {
                    rest = tail;
                    children[n as usize]
                }
            },
            Node::Leaf { path, value: v } => return last && path == rest && v == value,
            Node::Ext { path, child } => {
                if !rest.starts_with(&path) {
                    return false;
                }
                rest = &rest[path.len()..];
                Some(child)
            }
        };
        match (next, nodes.get(i + 1)) {
            (Some(id), Some(nb)) if NodeId::of(nb) == id => {}
            _ => return false,
        }
    }
    false
}
