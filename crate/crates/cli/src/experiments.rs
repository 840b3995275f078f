use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use siri_core::metrics::{measure, predict_dedup, TheoryParams};
use siri_core::workload::{
    self, batch_writes, gen_alpha_versions, gen_group_workloads, gen_ops, KeyOrder, Op, Scenario,
};
use siri_core::{Entry, Error, MbtMeta, Meta, Result, RootHandle, Store, StructureKind};

use crate::config::{Command, ExperimentConfig};
use crate::table::{fmt_f, Table};

pub const THROUGHPUT_HEADER: [&str; 6] = ["structure", "n", "theta", "write_ratio", "ops_per_sec", "mean_visits"];
pub const LATENCY_HEADER: [&str; 5] = ["structure", "op", "histogram", "bucket", "count"];
pub const STORAGE_HEADER: [&str; 4] = ["structure", "n_versions", "total_bytes", "total_nodes"];
pub const DEDUP_HEADER: [&str; 6] = [
    "structure",
    "overlap_or_alpha",
    "batch",
    "measured_eta",
    "predicted_eta",
    "sharing_ratio",
];
pub const PARAMS_HEADER: [&str; 5] = ["structure", "param", "value", "measured_eta", "sharing_ratio"];
pub const DIFF_HEADER: [&str; 4] = ["structure", "delta", "diff_ms", "visits"];

/// Latency buckets are powers of two in microseconds; a bucket holds samples
/// strictly below its bound. The grid is fixed so row sets are reproducible.
const LATENCY_BUCKETS: u32 = 24;

pub const POS_NODE_SIZES: [usize; 4] = [512, 1024, 2048, 4096];
pub const MBT_BUCKET_COUNTS: [usize; 4] = [4000, 6000, 8000, 10000];
pub const MPT_KEY_MINS: [usize; 3] = [5, 9, 12];

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    match command {
        Command::Throughput => cmd_throughput(cfg),
        Command::Latency => cmd_latency(cfg),
        Command::Storage => cmd_storage(cfg),
        Command::Dedup => cmd_dedup(cfg),
        Command::Params => cmd_params(cfg),
        Command::Diffbench => cmd_diffbench(cfg),
    }
}

fn empty_root(store: &Store, meta: Meta, ablate_ri: bool) -> Result<RootHandle> {
    let root = RootHandle::empty(store, meta)?;
    Ok(if ablate_ri { root.wrap_no_recursive_identity() } else { root })
}

fn base_root(store: &Store, cfg: &ExperimentConfig, meta: Meta, data: &[Entry]) -> Result<RootHandle> {
    empty_root(store, meta, cfg.ablate_ri)?.put_batch(store, data)
}

/// `count` batches of `size` distinct records from `data`, each with fresh
/// values.
pub fn update_batches(data: &[Entry], count: usize, size: usize, value_mean: usize, seed: u64) -> Vec<Vec<Entry>> {
    let mut values = workload::rng(seed ^ 0x5EED_u64);
    (0..count)
        .map(|v| {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            workload::shuffle(&mut idx, seed.wrapping_add(v as u64 + 1));
            idx.truncate(size);
            idx.sort_unstable();
            idx.into_iter()
                .map(|i| Entry::new(data[i].key.clone(), workload::gen_value(&mut values, value_mean)))
                .collect()
        })
        .collect()
}

fn single_batch(cfg: &ExperimentConfig, default: usize) -> Result<usize> {
    match cfg.batches(default).as_slice() {
        [b] if *b > 0 => Ok(*b),
        [_] => Err(Error::Usage("--batch must be positive".into())),
        _ => Err(Error::Usage("this subcommand takes a single --batch value".into())),
    }
}

/// Runs one pass of `ops` from `base`; returns (visits, ops executed).
fn run_ops(store: &Store, base: &RootHandle, ops: &[Vec<Op>], readers: usize) -> Result<(u64, u64)> {
    let mut root = base.clone();
    let (mut visits, mut count) = (0u64, 0u64);
    for batch in ops {
        let reads: Vec<&[u8]> = batch
            .iter()
            .filter_map(|op| match op {
                Op::Read(k) => Some(k.as_slice()),
                Op::Write(_) => None,
            })
            .collect();
        visits += read_all(store, &root, &reads, readers)?;
        let writes = batch_writes(batch);
        if !writes.is_empty() {
            let (next, stats) = root.put_batch_traced(store, &writes)?;
            visits += stats.visits as u64;
            root = next;
        }
        count += batch.len() as u64;
    }
    Ok((visits, count))
}

fn read_all(store: &Store, root: &RootHandle, keys: &[&[u8]], readers: usize) -> Result<u64> {
    if readers <= 1 || keys.len() < 2 {
        let mut visits = 0;
        for k in keys {
            visits += root.lookup_traced(store, k)?.1.visits as u64;
        }
        return Ok(visits);
    }
    let per = keys.len().div_ceil(readers);
    std::thread::scope(|s| {
        let handles: Vec<_> = keys
            .chunks(per)
            .map(|part| s.spawn(move || read_all(store, root, part, 1)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("reader thread panicked")).sum()
    })
}

pub fn cmd_throughput(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = Table::new(&THROUGHPUT_HEADER, &["ops_per_sec"]);
    let batch = single_batch(cfg, 1)?;
    for kind in cfg.structures()? {
        let meta = cfg.meta(kind)?;
        for n in cfg.ns(10_000) {
            let data = cfg.dataset(n)?;
            let mut spec = cfg.spec(n);
            spec.batch_size = batch;
            let ops = gen_ops(&spec, &data, cfg.ops)?;
            let store = Store::new();
            let base = base_root(&store, cfg, meta.clone(), &data)?;
            let (mut secs, mut visits, mut count) = (0.0, 0, 0);
            for _ in 0..cfg.repetitions {
                let start = Instant::now();
                (visits, count) = run_ops(&store, &base, &ops, cfg.readers)?;
                secs += start.elapsed().as_secs_f64();
            }
            let ops_per_sec = if secs > 0.0 { (count * cfg.repetitions as u64) as f64 / secs } else { 0.0 };
            let mean_visits = if count > 0 { visits as f64 / count as f64 } else { 0.0 };
            t.push(vec![
                kind.to_string(),
                n.to_string(),
                fmt_f(cfg.theta),
                fmt_f(cfg.write_ratio),
                format!("{ops_per_sec:.1}"),
                fmt_f(mean_visits),
            ]);
        }
    }
    Ok(t)
}

fn latency_bucket(micros: u128) -> u32 {
    let b = (u128::BITS - micros.leading_zeros()).min(LATENCY_BUCKETS);
    1 << b
}

pub fn cmd_latency(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = Table::new(&LATENCY_HEADER, &["count"]);
    let batch = single_batch(cfg, 1)?;
    for kind in cfg.structures()? {
        let meta = cfg.meta(kind)?;
        let n = cfg.ns(10_000)[0];
        let data = cfg.dataset(n)?;
        let mut spec = cfg.spec(n);
        spec.batch_size = batch;
        let ops = gen_ops(&spec, &data, cfg.ops)?;
        if ops.is_empty() {
            continue;
        }
        let store = Store::new();
        let mut root = base_root(&store, cfg, meta, &data)?;
        let mut latency: BTreeMap<(&str, u32), u64> = BTreeMap::new();
        let mut paths: BTreeMap<(&str, usize), u64> = BTreeMap::new();
        for op in ["read", "write"] {
            for b in 0..=LATENCY_BUCKETS {
                latency.insert((op, 1 << b), 0);
            }
        }
        for batch in &ops {
            for op in batch {
                if let Op::Read(k) = op {
                    let start = Instant::now();
                    let (_, stats) = root.lookup_traced(&store, k)?;
                    *latency.entry(("read", latency_bucket(start.elapsed().as_micros()))).or_default() += 1;
                    *paths.entry(("read", stats.visits)).or_default() += 1;
                }
            }
            let writes = batch_writes(batch);
            if !writes.is_empty() {
                let start = Instant::now();
                let (next, stats) = root.put_batch_traced(&store, &writes)?;
                *latency.entry(("write", latency_bucket(start.elapsed().as_micros()))).or_default() += 1;
                *paths.entry(("write", stats.visits)).or_default() += 1;
                root = next;
            }
        }
        for ((op, bucket), count) in latency {
            t.push(vec![kind.to_string(), op.into(), "latency_us".into(), bucket.to_string(), count.to_string()]);
        }
        for ((op, visits), count) in paths {
            t.push_exact(vec![kind.to_string(), op.into(), "path_length".into(), visits.to_string(), count.to_string()]);
        }
    }
    Ok(t)
}

pub fn cmd_storage(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = Table::new(&STORAGE_HEADER, &[]);
    let versions = cfg.versions.unwrap_or(10);
    let batch = single_batch(cfg, 1000)?;
    for kind in cfg.structures()? {
        let meta = cfg.meta(kind)?;
        for n in cfg.ns(10_000) {
            let row = |k: usize, bytes: u64, nodes: usize| {
                vec![kind.to_string(), k.to_string(), bytes.to_string(), nodes.to_string()]
            };
            t.push(row(0, 0, 0));
            if versions == 0 {
                continue;
            }
            let data = cfg.dataset(n)?;
            let store = Store::new();
            let mut root = base_root(&store, cfg, meta.clone(), &data)?;
            let edits = update_batches(&data, versions - 1, batch.min(data.len()), cfg.value_mean, cfg.seed);
            let mut union = HashSet::new();
            let mut bytes = 0u64;
            for k in 1..=versions {
                if k > 1 {
                    root = root.put_batch(&store, &edits[k - 2])?;
                }
                for (id, size) in root.reachable(&store)? {
                    if union.insert(id) {
                        bytes += size as u64;
                    }
                }
                t.push(row(k, bytes, union.len()));
            }
        }
    }
    Ok(t)
}

pub fn cmd_dedup(cfg: &ExperimentConfig) -> Result<Table> {
    if cfg.alpha.is_empty() {
        dedup_overlap(cfg)
    } else {
        dedup_alpha(cfg)
    }
}

/// Two or more versions that differ over a contiguous key range.
fn dedup_alpha(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = Table::new(&DEDUP_HEADER, &[]);
    let versions = cfg.versions.unwrap_or(2);
    for kind in cfg.structures()? {
        let meta = cfg.meta(kind)?;
        for n in cfg.ns(10_000) {
            let pool = cfg.dataset(n)?;
            for &alpha in &cfg.alpha {
                let order = match &meta {
                    Meta::Mbt(m) => KeyOrder::Bucketed { buckets: m.buckets },
                    _ => KeyOrder::Lexicographic,
                };
                let av = gen_alpha_versions(&pool, alpha, versions, Scenario::Update, order, cfg.seed)?;
                let store = Store::new();
                let mut roots = vec![base_root(&store, cfg, meta.clone(), &av.base)?];
                for e in &av.edits {
                    let next = roots.last().unwrap().put_batch(&store, e)?;
                    roots.push(next);
                }
                let report = measure(&store, &roots)?;
                let edited = av.edits.first().map(Vec::as_slice).unwrap_or(&[]);
                let (m, b) = match &meta {
                    Meta::Mbt(mm) => (mm.fanout, mm.buckets),
                    _ => (16, 0),
                };
                let predicted = predict_dedup(kind, &TheoryParams::from_entries(&av.base, edited, m, b))
                    .filter(|_| !cfg.ablate_ri && versions == 2)
                    .map(fmt_f)
                    .unwrap_or_default();
                t.push(vec![
                    kind.to_string(),
                    fmt_f(alpha),
                    edited.len().to_string(),
                    fmt_f(report.dedup_ratio),
                    predicted,
                    fmt_f(report.node_sharing_ratio),
                ]);
            }
        }
    }
    Ok(t)
}

/// Groups with overlapping record sets each load their data in batches; every
/// intermediate root counts as a version.
fn dedup_overlap(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = Table::new(&DEDUP_HEADER, &[]);
    let overlaps = if cfg.overlap.is_empty() { vec![0.0, 0.25, 0.5, 0.75, 1.0] } else { cfg.overlap.clone() };
    let groups = cfg.groups.unwrap_or(4);
    for kind in cfg.structures()? {
        let meta = cfg.meta(kind)?;
        for n in cfg.ns(10_000) {
            for &overlap in &overlaps {
                let mut spec = cfg.spec(n);
                spec.overlap_ratio = overlap;
                spec.groups = groups;
                let workloads = gen_group_workloads(&spec)?;
                for batch in cfg.batches(1000) {
                    if batch == 0 {
                        return Err(Error::Usage("--batch must be positive".into()));
                    }
                    let report = overlap_versions(cfg, &meta, &workloads, batch)?;
                    t.push(vec![
                        kind.to_string(),
                        fmt_f(overlap),
                        batch.to_string(),
                        fmt_f(report.dedup_ratio),
                        String::new(),
                        fmt_f(report.node_sharing_ratio),
                    ]);
                }
            }
        }
    }
    Ok(t)
}

pub fn overlap_versions(
    cfg: &ExperimentConfig,
    meta: &Meta,
    workloads: &[Vec<Entry>],
    batch: usize,
) -> Result<siri_core::metrics::DedupReport> {
    let store = Store::new();
    let mut roots = Vec::new();
    for (g, data) in workloads.iter().enumerate() {
        let mut order = data.clone();
        workload::shuffle(&mut order, cfg.seed ^ (g as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut root = empty_root(&store, meta.clone(), cfg.ablate_ri)?;
        for chunk in order.chunks(batch) {
            root = root.put_batch(&store, chunk)?;
            roots.push(root.clone());
        }
    }
    measure(&store, &roots)
}

pub fn cmd_params(cfg: &ExperimentConfig) -> Result<Table> {
    if cfg.pos_node_bytes.is_some() || cfg.mbt_buckets.is_some() {
        return Err(Error::Usage("params sweeps --pos-node-bytes and --mbt-buckets itself".into()));
    }
    let mut t = Table::new(&PARAMS_HEADER, &[]);
    let versions = cfg.versions.unwrap_or(10);
    let batch = single_batch(cfg, 100)?;
    let n = cfg.ns(10_000)[0];
    for kind in cfg.structures()? {
        let points: Vec<(Meta, String, ExperimentConfig)> = match kind {
            StructureKind::Pos => POS_NODE_SIZES
                .iter()
                .map(|&nb| Ok((Meta::Pos(cfg.pos_config(Some(nb))?), nb.to_string(), cfg.clone())))
                .collect::<Result<_>>()?,
            StructureKind::Mbt => MBT_BUCKET_COUNTS
                .iter()
                .map(|&b| (Meta::Mbt(MbtMeta::new(b, cfg.mbt_meta().fanout)), b.to_string(), cfg.clone()))
                .collect(),
            StructureKind::Mpt => MPT_KEY_MINS
                .iter()
                .map(|&min| {
                    let mut c = cfg.clone();
                    c.key_min = min;
                    c.key_max = c.key_max.max(min);
                    (Meta::Mpt, String::new(), c)
                })
                .collect(),
            StructureKind::Mvmb => continue,
        };
        let param = match kind {
            StructureKind::Pos => "node_bytes",
            StructureKind::Mbt => "buckets",
            _ => "mean_key_len",
        };
        for (meta, value, c) in points {
            let data = c.dataset(n)?;
            let value = if value.is_empty() {
                let total: usize = data.iter().map(|e| e.key.len()).sum();
                fmt_f(total as f64 / data.len().max(1) as f64)
            } else {
                value
            };
            let store = Store::new();
            let mut roots = vec![base_root(&store, &c, meta, &data)?];
            for e in update_batches(&data, versions, batch.min(data.len()), c.value_mean, c.seed) {
                let next = roots.last().unwrap().put_batch(&store, &e)?;
                roots.push(next);
            }
            let report = measure(&store, &roots)?;
            t.push(vec![
                kind.to_string(),
                param.into(),
                value,
                fmt_f(report.dedup_ratio),
                fmt_f(report.node_sharing_ratio),
            ]);
        }
    }
    Ok(t)
}

/// Sequential inserts in the given order.
fn insert_all(store: &Store, meta: Meta, data: &[Entry]) -> Result<RootHandle> {
    let mut root = RootHandle::empty(store, meta)?;
    for e in data {
        root = root.insert(store, &e.key, &e.value)?;
    }
    Ok(root)
}

pub fn cmd_diffbench(cfg: &ExperimentConfig) -> Result<Table> {
    if cfg.ablate_ri {
        return Err(Error::Usage("diffbench does not support --ablate-ri".into()));
    }
    let mut t = Table::new(&DIFF_HEADER, &["diff_ms"]);
    let deltas = if cfg.delta.is_empty() { vec![1, 10, 100, 1000] } else { cfg.delta.clone() };
    let n = cfg.ns(10_000)[0];
    let data = cfg.dataset(n)?;
    for kind in cfg.structures()? {
        let meta = cfg.meta(kind)?;
        let store = Store::new();
        let mut order_a = data.clone();
        workload::shuffle(&mut order_a, cfg.seed ^ 0xA);
        let mut order_b = data.clone();
        workload::shuffle(&mut order_b, cfg.seed ^ 0xB);
        let a = insert_all(&store, meta.clone(), &order_a)?;
        let b_base = insert_all(&store, meta, &order_b)?;
        for &delta in &deltas {
            let edits = update_batches(&data, 1, delta.min(data.len()), cfg.value_mean, cfg.seed ^ delta as u64);
            let b = b_base.put_batch(&store, &edits[0])?;
            let mut secs = 0.0;
            let mut visits = 0;
            for _ in 0..cfg.repetitions {
                let start = Instant::now();
                let (_, stats) = a.diff_traced(&store, &b)?;
                secs += start.elapsed().as_secs_f64();
                visits = stats.visits;
            }
            t.push(vec![
                kind.to_string(),
                delta.to_string(),
                format!("{:.4}", secs * 1000.0 / cfg.repetitions as f64),
                visits.to_string(),
            ]);
        }
    }
    Ok(t)
}
