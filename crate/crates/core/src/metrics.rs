//! Storage sharing across index versions, and the closed-form predictions for
//! two versions that differ over a contiguous key range.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::index::{children_of, Entry, Meta, RootHandle, StructureKind};
use crate::store::{NodeId, Store};
use crate::workload::AlphaVersions;

/// Hash size in bytes used by every node reference.
pub const HASH_BYTES: f64 = 32.0;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DedupReport {
    pub union_bytes: u64,
    pub sum_bytes: u64,
    pub dedup_ratio: f64,
    pub union_nodes: u64,
    pub sum_nodes: u64,
    pub node_sharing_ratio: f64,
}

fn ratio(union: u64, sum: u64) -> f64 {
    if sum == 0 {
        0.0
    } else {
        1.0 - union as f64 / sum as f64
    }
}

/// Page-level sharing over the node sets reachable from each root. Every
/// node counts once per root that reaches it in `sum_*` and once overall in
/// `union_*`.
pub fn measure(store: &Store, roots: &[RootHandle]) -> Result<DedupReport> {
    let mut known: HashMap<NodeId, (u64, Vec<NodeId>)> = HashMap::new();
    let mut union: HashSet<NodeId> = HashSet::new();
    let (mut sum_bytes, mut sum_nodes, mut union_bytes) = (0u64, 0u64, 0u64);
    for root in roots {
        let Some(r) = root.root() else {
            continue;
        };
        let kind = root.kind();
        let mut seen: HashSet<NodeId> = HashSet::new();
        let mut stack = vec![r];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            let (size, kids) = match known.get(&id) {
                Some((s, k)) => (*s, k.clone()),
                None => {
                    let bytes = store.get(&id).ok_or(Error::Dangling(id))?;
                    let kids = children_of(kind, &bytes)?;
                    known.insert(id, (bytes.len() as u64, kids.clone()));
                    (bytes.len() as u64, kids)
                }
            };
            sum_bytes += size;
            sum_nodes += 1;
            if union.insert(id) {
                union_bytes += size;
            }
            stack.extend(kids);
        }
    }
    let union_nodes = union.len() as u64;
    Ok(DedupReport {
        union_bytes,
        sum_bytes,
        dedup_ratio: ratio(union_bytes, sum_bytes),
        union_nodes,
        sum_nodes,
        node_sharing_ratio: ratio(union_nodes, sum_nodes),
    })
}

/// Inputs of the analytical model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryParams {
    /// Records per version.
    pub n: f64,
    /// Fanout.
    pub m: f64,
    /// MBT bucket count.
    pub b: f64,
    /// Key length (bytes) of the records that change.
    pub l_max: f64,
    /// Mean key length (bytes).
    pub l_mean: f64,
    /// Records that differ between the two versions.
    pub delta: f64,
    /// Mean record size in bytes.
    pub r: f64,
    /// Hash size in bytes.
    pub c: f64,
}

impl TheoryParams {
    pub fn alpha(&self) -> f64 {
        if self.n == 0.0 {
            0.0
        } else {
            self.delta / self.n
        }
    }

    /// Key-length and record-size statistics of `entries`; `edited` gives the
    /// records that change.
    pub fn from_entries(entries: &[Entry], edited: &[Entry], m: usize, b: usize) -> Self {
        let n = entries.len().max(1) as f64;
        let key_mean = entries.iter().map(|e| e.key.len()).sum::<usize>() as f64 / n;
        let record_mean = entries.iter().map(|e| e.key.len() + e.value.len()).sum::<usize>() as f64 / n;
        let l_max = edited.iter().map(|e| e.key.len()).max().unwrap_or(0) as f64;
        TheoryParams {
            n: entries.len() as f64,
            m: m as f64,
            b: b as f64,
            l_max,
            l_mean: key_mean,
            delta: edited.len() as f64,
            r: record_mean,
            c: HASH_BYTES,
        }
    }

    /// Internal node count of a complete m-ary tree over `b` buckets.
    pub fn mbt_internal_nodes(&self) -> f64 {
        (self.b - 1.0) / (self.m - 1.0)
    }
}

/// Predicted deduplication ratio of two sequential versions. `None` for the
/// order-dependent baseline, which has no closed form.
pub fn predict_dedup(kind: StructureKind, p: &TheoryParams) -> Option<f64> {
    let alpha = p.alpha();
    match kind {
        StructureKind::Mbt | StructureKind::Pos => Some(0.5 - alpha / 2.0),
        StructureKind::Mpt => {
            let changed = alpha * p.n * (p.l_max * p.c + p.r);
            let total = p.n * p.r + p.n * p.l_mean * p.c;
            Some(0.5 - changed / (2.0 * total))
        }
        StructureKind::Mvmb => None,
    }
}

/// Builds the base version and applies each edit batch in turn, then measures
/// sharing over all versions.
pub fn continuous_differential(store: &Store, meta: Meta, versions: &AlphaVersions) -> Result<DedupReport> {
    let roots = build_versions(store, meta, versions)?;
    measure(store, &roots)
}

pub fn build_versions(store: &Store, meta: Meta, versions: &AlphaVersions) -> Result<Vec<RootHandle>> {
    let mut roots = vec![RootHandle::build(store, meta, &versions.base)?];
    for batch in &versions.edits {
        let next = roots.last().unwrap().put_batch(store, batch)?;
        roots.push(next);
    }
    Ok(roots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(alpha: f64) -> TheoryParams {
        TheoryParams {
            n: 1000.0,
            m: 4.0,
            b: 1024.0,
            l_max: 10.0,
            l_mean: 10.0,
            delta: alpha * 1000.0,
            r: 266.0,
            c: 32.0,
        }
    }

    #[test]
    fn closed_forms() {
        assert!((predict_dedup(StructureKind::Mbt, &params(0.2)).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(predict_dedup(StructureKind::Pos, &params(0.0)), Some(0.5));
        for a in [0.1, 0.3, 0.9] {
            let mpt = predict_dedup(StructureKind::Mpt, &params(a)).unwrap();
            assert!((mpt - (0.5 - a / 2.0)).abs() < 1e-12);
        }
        let mut longer = params(0.5);
        longer.l_max = 15.0;
        assert!(predict_dedup(StructureKind::Mpt, &longer).unwrap() < 0.25);
        assert_eq!(predict_dedup(StructureKind::Mvmb, &params(0.5)), None);
        assert_eq!(params(0.0).mbt_internal_nodes(), 341.0);
    }

    #[test]
    fn identical_roots() {
        let s = Store::new();
        let entries: Vec<Entry> = (0..50u32).map(|i| Entry::new(i.to_be_bytes(), vec![7; 40])).collect();
        for kind in StructureKind::ALL {
            let h = RootHandle::build(&s, Meta::default_for(kind), &entries).unwrap();
            assert_eq!(measure(&s, std::slice::from_ref(&h)).unwrap().dedup_ratio, 0.0);
            for k in [2usize, 3, 10] {
                let rep = measure(&s, &vec![h.clone(); k]).unwrap();
                assert_eq!(rep.dedup_ratio, 1.0 - 1.0 / k as f64);
                assert_eq!(rep.node_sharing_ratio, 1.0 - 1.0 / k as f64);
            }
        }
    }
}
