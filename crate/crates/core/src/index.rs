//! The persistent-index contract shared by all four structures.
//!
//! A [`RootHandle`] names one immutable version of one index. Every write
//! returns a new handle and leaves the old one readable; unchanged subtrees
//! are shared through the [`Store`]. Diff and merge are structure-agnostic at
//! this layer and delegate the tree walk to each structure.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::codec;
use crate::error::{Error, Result};
use crate::mbt::{self, MbtMeta};
use crate::mpt;
use crate::mvmb::{self, MvmbMeta};
use crate::pos::{self, PosConfig};
use crate::store::{NodeId, Store};

pub const MAX_KEY_BYTES: usize = 1024;
pub const MAX_VALUE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Entry {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl Entry {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Entry {
            key: key.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StructureKind {
    Mpt,
    Mbt,
    Pos,
    Mvmb,
}

impl StructureKind {
    pub const ALL: [StructureKind; 4] = [
        StructureKind::Mpt,
        StructureKind::Mbt,
        StructureKind::Pos,
        StructureKind::Mvmb,
    ];

    /// Whether the layout is a pure function of the record set.
    pub fn is_structurally_invariant(self) -> bool {
        self != StructureKind::Mvmb
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::Mpt => "mpt",
            StructureKind::Mbt => "mbt",
            StructureKind::Pos => "pos",
            StructureKind::Mvmb => "mvmb",
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mpt" => Ok(StructureKind::Mpt),
            "mbt" => Ok(StructureKind::Mbt),
            "pos" => Ok(StructureKind::Pos),
            "mvmb" => Ok(StructureKind::Mvmb),
            other => Err(Error::usage(format!("unknown structure {other:?}"))),
        }
    }
}

/// Structure parameters frozen for the lifetime of a lineage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Meta {
    Mpt,
    Mbt(MbtMeta),
    Pos(PosConfig),
    Mvmb(MvmbMeta),
}

impl Meta {
    pub fn kind(&self) -> StructureKind {
        match self {
            Meta::Mpt => StructureKind::Mpt,
            Meta::Mbt(_) => StructureKind::Mbt,
            Meta::Pos(_) => StructureKind::Pos,
            Meta::Mvmb(_) => StructureKind::Mvmb,
        }
    }

    /// Default benchmark parameters for `kind`.
    pub fn default_for(kind: StructureKind) -> Meta {
        match kind {
            StructureKind::Mpt => Meta::Mpt,
            StructureKind::Mbt => Meta::Mbt(MbtMeta::default()),
            StructureKind::Pos => Meta::Pos(PosConfig::default()),
            StructureKind::Mvmb => Meta::Mvmb(MvmbMeta::default()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Meta::Mpt => Ok(()),
            Meta::Mbt(m) => m.validate(),
            Meta::Pos(c) => c.validate(),
            Meta::Mvmb(m) => m.validate(),
        }
    }
}

/// Per-operation observables: distinct nodes read and nodes newly added to
/// the store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpStats {
    pub visits: usize,
    pub created: usize,
}

/// Records present in only one index, or present in both with different
/// values. All lists are sorted by key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiffResult {
    pub only_in_a: Vec<Entry>,
    pub only_in_b: Vec<Entry>,
    pub modified: Vec<Conflict>,
}

impl DiffResult {
    pub fn is_empty(&self) -> bool {
        self.only_in_a.is_empty() && self.only_in_b.is_empty() && self.modified.is_empty()
    }

    pub fn len(&self) -> usize {
        self.only_in_a.len() + self.only_in_b.len() + self.modified.len()
    }

    fn sort(&mut self) {
        self.only_in_a.sort_by(|x, y| x.key.cmp(&y.key));
        self.only_in_b.sort_by(|x, y| x.key.cmp(&y.key));
        self.modified.sort_by(|x, y| x.key.cmp(&y.key));
    }

    /// Record-level comparison of two key-sorted entry runs.
    pub(crate) fn push_sorted(&mut self, a: Vec<Entry>, b: Vec<Entry>) {
        let mut a = a.into_iter().peekable();
        let mut b = b.into_iter().peekable();
        loop {
            match (a.peek(), b.peek()) {
                (None, None) => break,
                (Some(_), None) => self.only_in_a.push(a.next().unwrap()),
                (None, Some(_)) => self.only_in_b.push(b.next().unwrap()),
                (Some(x), Some(y)) => match x.key.cmp(&y.key) {
                    std::cmp::Ordering::Less => self.only_in_a.push(a.next().unwrap()),
                    std::cmp::Ordering::Greater => self.only_in_b.push(b.next().unwrap()),
                    std::cmp::Ordering::Equal => {
                        let (x, y) = (a.next().unwrap(), b.next().unwrap());
                        if x.value != y.value {
                            self.modified.push(Conflict {
                                key: x.key,
                                value_a: x.value,
                                value_b: y.value,
                            });
                        }
                    }
                },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub key: Vec<u8>,
    pub value_a: Vec<u8>,
    pub value_b: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStrategy {
    /// Stop and report every conflicting key.
    Abort,
    /// Keep the receiver's value.
    TakeA,
    /// Keep the argument's value.
    TakeB,
}

#[derive(Debug, Clone)]
pub enum MergeOutcome {
    Merged(RootHandle),
    Conflicts(Vec<Conflict>),
}

/// Serialized nodes from the root down to the node binding the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proof {
    pub path_nodes: Vec<Vec<u8>>,
}

/// Operation context: counts distinct node reads and new node writes.
pub(crate) struct Ctx<'s> {
    pub store: &'s Store,
    pub stats: OpStats,
    seen: HashSet<NodeId>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s Store) -> Self {
        Ctx {
            store,
            stats: OpStats::default(),
            seen: HashSet::new(),
        }
    }

    pub fn load(&mut self, id: &NodeId) -> Result<Arc<[u8]>> {
        let bytes = self.store.get(id).ok_or(Error::Dangling(*id))?;
        if self.seen.insert(*id) {
            self.stats.visits += 1;
        }
        Ok(bytes)
    }

    pub fn put(&mut self, bytes: Vec<u8>) -> NodeId {
        let (id, new) = self.store.insert(bytes);
        if new {
            self.stats.created += 1;
        }
        id
    }
}

/// Sorted upserts (`Some`) and removals (`None`).
pub(crate) type Edits = BTreeMap<Vec<u8>, Option<Vec<u8>>>;

fn check_key(key: &[u8]) -> Result<()> {
    if key.is_empty() || key.len() > MAX_KEY_BYTES {
        return Err(Error::usage(format!(
            "key length {} outside 1..={MAX_KEY_BYTES}",
            key.len()
        )));
    }
    Ok(())
}

fn check_entry(key: &[u8], value: &[u8]) -> Result<()> {
    check_key(key)?;
    if value.len() > MAX_VALUE_BYTES {
        return Err(Error::usage(format!(
            "value length {} exceeds {MAX_VALUE_BYTES}",
            value.len()
        )));
    }
    Ok(())
}

/// One immutable version of one index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootHandle {
    meta: Meta,
    root: Option<NodeId>,
    no_recursive_identity: bool,
}

impl RootHandle {
    /// An empty index. MBT materializes its fixed bucket layer here.
    pub fn empty(store: &Store, meta: Meta) -> Result<Self> {
        meta.validate()?;
        let root = match &meta {
            Meta::Mbt(m) => Some(mbt::empty(&mut Ctx::new(store), m)),
            _ => None,
        };
        Ok(RootHandle {
            meta,
            root,
            no_recursive_identity: false,
        })
    }

    /// Builds an index over `entries` in one pass.
    pub fn build(store: &Store, meta: Meta, entries: &[Entry]) -> Result<Self> {
        Self::empty(store, meta)?.put_batch(store, entries)
    }

    pub fn kind(&self) -> StructureKind {
        self.meta.kind()
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    /// Root digest; `None` for an empty MPT, POS-Tree or MVMB+-Tree.
    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn is_no_recursive_identity(&self) -> bool {
        self.no_recursive_identity
    }

    /// Ablation wrapper: every subsequent write deep-copies the whole tree
    /// under a fresh salt so no node is shared with any other version.
    pub fn wrap_no_recursive_identity(&self) -> RootHandle {
        RootHandle {
            no_recursive_identity: true,
            ..self.clone()
        }
    }

    fn derive(&self, root: Option<NodeId>) -> RootHandle {
        RootHandle {
            meta: self.meta.clone(),
            root,
            no_recursive_identity: self.no_recursive_identity,
        }
    }

    pub fn lookup(&self, store: &Store, key: &[u8]) -> Result<Option<Vec<u8>>> {
        Ok(self.lookup_traced(store, key)?.0)
    }

    pub fn lookup_traced(&self, store: &Store, key: &[u8]) -> Result<(Option<Vec<u8>>, OpStats)> {
        let mut ctx = Ctx::new(store);
        let v = match &self.meta {
            Meta::Mpt => mpt::lookup(&mut ctx, self.root, key)?,
            Meta::Mbt(m) => mbt::lookup(&mut ctx, self.root, m, key)?,
            Meta::Pos(_) => pos::lookup(&mut ctx, self.root, key)?,
            Meta::Mvmb(_) => mvmb::lookup(&mut ctx, self.root, key)?,
        };
        Ok((v, ctx.stats))
    }

    pub fn insert(&self, store: &Store, key: &[u8], value: &[u8]) -> Result<RootHandle> {
        Ok(self.insert_traced(store, key, value)?.0)
    }

    pub fn insert_traced(
        &self,
        store: &Store,
        key: &[u8],
        value: &[u8],
    ) -> Result<(RootHandle, OpStats)> {
        check_entry(key, value)?;
        let mut edits = Edits::new();
        edits.insert(key.to_vec(), Some(value.to_vec()));
        self.apply_traced(store, edits)
    }

    pub fn remove(&self, store: &Store, key: &[u8]) -> Result<RootHandle> {
        Ok(self.remove_traced(store, key)?.0)
    }

    pub fn remove_traced(&self, store: &Store, key: &[u8]) -> Result<(RootHandle, OpStats)> {
        check_key(key)?;
        let mut edits = Edits::new();
        edits.insert(key.to_vec(), None);
        self.apply_traced(store, edits)
    }

    /// Upserts every entry. Equivalent to inserting them one at a time.
    pub fn put_batch(&self, store: &Store, entries: &[Entry]) -> Result<RootHandle> {
        Ok(self.put_batch_traced(store, entries)?.0)
    }

    pub fn put_batch_traced(
        &self,
        store: &Store,
        entries: &[Entry],
    ) -> Result<(RootHandle, OpStats)> {
        let mut edits = Edits::new();
        for e in entries {
            check_entry(&e.key, &e.value)?;
            if edits.insert(e.key.clone(), Some(e.value.clone())).is_some() {
                return Err(Error::usage("duplicate key in batch"));
            }
        }
        self.apply_traced(store, edits)
    }

    /// Applies a mixed batch of upserts and removals.
    pub fn apply_batch(
        &self,
        store: &Store,
        edits: impl IntoIterator<Item = (Vec<u8>, Option<Vec<u8>>)>,
    ) -> Result<RootHandle> {
        let mut map = Edits::new();
        for (k, v) in edits {
            match &v {
                Some(v) => check_entry(&k, v)?,
                None => check_key(&k)?,
            }
            if map.insert(k, v).is_some() {
                return Err(Error::usage("duplicate key in batch"));
            }
        }
        Ok(self.apply_traced(store, map)?.0)
    }

    fn apply_traced(&self, store: &Store, edits: Edits) -> Result<(RootHandle, OpStats)> {
        if edits.is_empty() {
            return Ok((self.clone(), OpStats::default()));
        }
        let mut ctx = Ctx::new(store);
        let root = match &self.meta {
            Meta::Mpt => mpt::apply(&mut ctx, self.root, &edits)?,
            Meta::Mbt(m) => Some(mbt::apply(&mut ctx, self.root, m, &edits)?),
            Meta::Pos(c) => pos::apply(&mut ctx, self.root, c, &edits)?.root,
            Meta::Mvmb(m) => mvmb::apply(&mut ctx, self.root, m, &edits)?,
        };
        if self.no_recursive_identity {
            let mut copy_ctx = Ctx::new(store);
            let root = match root {
                Some(r) => Some(deep_copy(&mut copy_ctx, self.kind(), r)?),
                None => None,
            };
            let stats = OpStats {
                visits: ctx.stats.visits,
                created: copy_ctx.stats.created,
            };
            return Ok((self.derive(root), stats));
        }
        Ok((self.derive(root), ctx.stats))
    }

    /// POS-Tree writes with per-layer re-chunking statistics.
    pub fn pos_apply_traced(
        &self,
        store: &Store,
        entries: &[Entry],
    ) -> Result<(RootHandle, pos::EditReport)> {
        let Meta::Pos(cfg) = &self.meta else {
            return Err(Error::usage("pos_apply_traced on a non-POS index"));
        };
        let mut edits = Edits::new();
        for e in entries {
            check_entry(&e.key, &e.value)?;
            edits.insert(e.key.clone(), Some(e.value.clone()));
        }
        let mut ctx = Ctx::new(store);
        let mut report = pos::apply(&mut ctx, self.root, cfg, &edits)?;
        report.stats = ctx.stats;
        Ok((self.derive(report.root), report))
    }

    fn check_compatible(&self, other: &RootHandle) -> Result<()> {
        if self.meta != other.meta {
            return Err(Error::usage(format!(
                "incompatible indexes: {:?} vs {:?}",
                self.meta, other.meta
            )));
        }
        Ok(())
    }

    pub fn diff(&self, store: &Store, other: &RootHandle) -> Result<DiffResult> {
        Ok(self.diff_traced(store, other)?.0)
    }

    /// Record-level difference; shared subtrees are skipped by id.
    pub fn diff_traced(&self, store: &Store, other: &RootHandle) -> Result<(DiffResult, OpStats)> {
        self.check_compatible(other)?;
        let mut ctx = Ctx::new(store);
        let mut out = DiffResult::default();
        if self.root == other.root {
            if self.root.is_some() {
                ctx.stats.visits = 1;
            }
            return Ok((out, ctx.stats));
        }
        match &self.meta {
            Meta::Mpt => mpt::diff(&mut ctx, self.root, other.root, &mut out)?,
            Meta::Mbt(_) => mbt::diff(&mut ctx, self.root, other.root, &mut out)?,
            Meta::Pos(_) => ordered_diff::<pos::PosNodes>(&mut ctx, self.root, other.root, &mut out)?,
            Meta::Mvmb(_) => {
                ordered_diff::<mvmb::MvmbNodes>(&mut ctx, self.root, other.root, &mut out)?
            }
        }
        out.sort();
        Ok((out, ctx.stats))
    }

    /// Diff, then apply the argument's changes onto the receiver.
    pub fn merge(
        &self,
        store: &Store,
        other: &RootHandle,
        strategy: MergeStrategy,
    ) -> Result<MergeOutcome> {
        let diff = self.diff(store, other)?;
        if strategy == MergeStrategy::Abort && !diff.modified.is_empty() {
            return Ok(MergeOutcome::Conflicts(diff.modified));
        }
        let mut batch = diff.only_in_b;
        if strategy == MergeStrategy::TakeB {
            batch.extend(diff.modified.into_iter().map(|c| Entry::new(c.key, c.value_b)));
        }
        Ok(MergeOutcome::Merged(self.put_batch(store, &batch)?))
    }

    pub fn prove(&self, store: &Store, key: &[u8]) -> Result<Proof> {
        let mut ctx = Ctx::new(store);
        let path_nodes = match &self.meta {
            Meta::Mpt => mpt::prove(&mut ctx, self.root, key)?,
            Meta::Mbt(m) => mbt::prove(&mut ctx, self.root, m, key)?,
            Meta::Pos(_) => pos::prove(&mut ctx, self.root, key)?,
            Meta::Mvmb(_) => mvmb::prove(&mut ctx, self.root, key)?,
        };
        Ok(Proof { path_nodes })
    }

    /// All records in key order.
    pub fn entries(&self, store: &Store) -> Result<Vec<Entry>> {
        let mut ctx = Ctx::new(store);
        let mut out = match &self.meta {
            Meta::Mpt => mpt::entries(&mut ctx, self.root)?,
            Meta::Mbt(_) => mbt::entries(&mut ctx, self.root)?,
            Meta::Pos(_) => pos::entries(&mut ctx, self.root)?,
            Meta::Mvmb(_) => mvmb::entries(&mut ctx, self.root)?,
        };
        if self.kind() == StructureKind::Mbt {
            out.sort_by(|a, b| a.key.cmp(&b.key));
        }
        Ok(out)
    }

    /// Distinct node ids reachable from the root, with their byte sizes.
    pub fn reachable(&self, store: &Store) -> Result<HashMap<NodeId, usize>> {
        let mut out = HashMap::new();
        let Some(root) = self.root else {
            return Ok(out);
        };
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if out.contains_key(&id) {
                continue;
            }
            let bytes = store.get(&id).ok_or(Error::Dangling(id))?;
            out.insert(id, bytes.len());
            stack.extend(children_of(self.kind(), &bytes)?);
        }
        Ok(out)
    }
}

/// Child ids referenced by a serialized node of `kind`.
pub fn children_of(kind: StructureKind, bytes: &[u8]) -> Result<Vec<NodeId>> {
    let bytes = codec::strip_salt(bytes);
    match kind {
        StructureKind::Mpt => mpt::children(bytes),
        StructureKind::Mbt => mbt::children(bytes),
        StructureKind::Pos => pos::children(bytes),
        StructureKind::Mvmb => mvmb::children(bytes),
    }
}

fn rewrite_children(kind: StructureKind, bytes: &[u8], ids: &[NodeId]) -> Result<Vec<u8>> {
    let bytes = codec::strip_salt(bytes);
    match kind {
        StructureKind::Mpt => mpt::rewrite_children(bytes, ids),
        StructureKind::Mbt => mbt::rewrite_children(bytes, ids),
        StructureKind::Pos => pos::rewrite_children(bytes, ids),
        StructureKind::Mvmb => mvmb::rewrite_children(bytes, ids),
    }
}

/// Copies every reachable node under one fresh salt.
fn deep_copy(ctx: &mut Ctx, kind: StructureKind, root: NodeId) -> Result<NodeId> {
    let salt = ctx.store.next_salt();
    let mut memo: HashMap<NodeId, NodeId> = HashMap::new();
    // Post-order without recursion.
    let mut stack = vec![(root, false)];
    while let Some((id, expanded)) = stack.pop() {
        if memo.contains_key(&id) {
            continue;
        }
        let bytes = ctx.load(&id)?;
        let kids = children_of(kind, &bytes)?;
        if !expanded {
            stack.push((id, true));
            stack.extend(kids.into_iter().filter(|k| !memo.contains_key(k)).map(|k| (k, false)));
            continue;
        }
        let mapped: Vec<NodeId> = kids.iter().map(|k| memo[k]).collect();
        let inner = rewrite_children(kind, &bytes, &mapped)?;
        let new_id = ctx.put(codec::salted(salt, &inner));
        memo.insert(id, new_id);
    }
    Ok(memo[&root])
}

/// Checks a membership proof against a root digest.
pub fn verify(meta: &Meta, digest: &NodeId, key: &[u8], value: &[u8], proof: &Proof) -> bool {
    let nodes = &proof.path_nodes;
    if nodes.is_empty() || NodeId::of(&nodes[0]) != *digest {
        return false;
    }
    match meta {
        Meta::Mpt => mpt::verify_path(key, value, nodes),
        Meta::Mbt(m) => mbt::verify_path(m, key, value, nodes),
        Meta::Pos(_) => pos::verify_path(key, value, nodes),
        Meta::Mvmb(_) => mvmb::verify_path(key, value, nodes),
    }
}

/// Node access for trees whose leaves sit at a uniform depth and hold
/// absolute keys (POS-Tree, MVMB+-Tree).
pub(crate) trait LeveledNodes {
    /// 0 for leaves.
    fn level(bytes: &[u8]) -> Result<u8>;
    fn children(bytes: &[u8]) -> Result<Vec<NodeId>>;
    fn leaf_entries(bytes: &[u8]) -> Result<Vec<Entry>>;
}

/// Level-synchronous diff: at each level ids present on both sides cancel
/// before anything is loaded; only the survivors are expanded, and surviving
/// leaves are compared record by record.
pub(crate) fn ordered_diff<N: LeveledNodes>(
    ctx: &mut Ctx,
    a: Option<NodeId>,
    b: Option<NodeId>,
    out: &mut DiffResult,
) -> Result<()> {
    fn level_of<N: LeveledNodes>(ctx: &mut Ctx, id: Option<NodeId>) -> Result<u8> {
        match id {
            Some(id) => N::level(codec::strip_salt(&ctx.load(&id)?)),
            None => Ok(0),
        }
    }
    fn expand<N: LeveledNodes>(ctx: &mut Ctx, frontier: &[NodeId]) -> Result<Vec<NodeId>> {
        let mut next = Vec::new();
        for id in frontier {
            next.extend(N::children(codec::strip_salt(&ctx.load(id)?))?);
        }
        Ok(next)
    }
    let (mut la, mut lb) = (level_of::<N>(ctx, a)?, level_of::<N>(ctx, b)?);
    let mut fa: Vec<NodeId> = a.into_iter().collect();
    let mut fb: Vec<NodeId> = b.into_iter().collect();
    while !fa.is_empty() && la > lb {
        fa = expand::<N>(ctx, &fa)?;
        la -= 1;
    }
    while !fb.is_empty() && lb > la {
        fb = expand::<N>(ctx, &fb)?;
        lb -= 1;
    }
    let mut level = la.max(lb);
    loop {
        let ids_a: HashSet<NodeId> = fa.iter().copied().collect();
        let ids_b: HashSet<NodeId> = fb.iter().copied().collect();
        fa.retain(|id| !ids_b.contains(id));
        fb.retain(|id| !ids_a.contains(id));
        if level == 0 || (fa.is_empty() && fb.is_empty()) {
            break;
        }
        fa = expand::<N>(ctx, &fa)?;
        fb = expand::<N>(ctx, &fb)?;
        level -= 1;
    }
    let mut collect = |f: &[NodeId]| -> Result<Vec<Entry>> {
        let mut v = Vec::new();
        for id in f {
            v.extend(N::leaf_entries(codec::strip_salt(&ctx.load(id)?))?);
        }
        Ok(v)
    };
    let (ea, eb) = (collect(&fa)?, collect(&fb)?);
    out.push_sorted(ea, eb);
    Ok(())
}
