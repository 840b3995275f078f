//! Deterministic synthetic workloads.
//!
//! All randomness comes from xoshiro256** seeded through splitmix64
//! (`Xoshiro256StarStar::seed_from_u64`), so every generator is a pure
//! function of its inputs and seed.

use std::collections::HashSet;
use std::io::BufRead;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::index::Entry;
use crate::mbt::bucket_of;

pub type WorkloadRng = Xoshiro256StarStar;

pub fn rng(seed: u64) -> WorkloadRng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub n_records: usize,
    pub key_len_min: usize,
    pub key_len_max: usize,
    pub value_len_mean: usize,
    pub zipf_theta: f64,
    pub write_ratio: f64,
    pub batch_size: usize,
    pub overlap_ratio: f64,
    pub groups: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_records: 10_000,
            key_len_min: 5,
            key_len_max: 15,
            value_len_mean: 256,
            zipf_theta: 0.0,
            write_ratio: 0.5,
            batch_size: 1,
            overlap_ratio: 0.0,
            groups: 1,
            seed: 42,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.key_len_min == 0 || self.key_len_min > self.key_len_max || self.key_len_max > 1024 {
            return Err(Error::usage("key lengths must satisfy 1 <= min <= max <= 1024"));
        }
        if !(0.0..1.0).contains(&self.zipf_theta) {
            return Err(Error::usage("zipf theta must lie in [0, 1)"));
        }
        for (name, v) in [("write ratio", self.write_ratio), ("overlap ratio", self.overlap_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::usage(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be positive"));
        }
        if self.key_len_min < 4 && self.n_records > 1 << (8 * self.key_len_min.min(3)) {
            return Err(Error::usage("too many records for the key length range"));
        }
        Ok(())
    }
}

/// Unique keys with lengths uniform over the configured range.
///
/// Each key draws a full-length random buffer and a length quantile, so specs
/// that differ only in the length range produce keys sharing prefixes.
struct KeyGen {
    rng: WorkloadRng,
    min: usize,
    max: usize,
    used: HashSet<Vec<u8>>,
}

impl KeyGen {
    fn new(spec: &WorkloadSpec, stream: u64) -> Self {
        KeyGen {
            rng: rng(spec.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            min: spec.key_len_min,
            max: spec.key_len_max,
            used: HashSet::new(),
        }
    }

    fn next(&mut self) -> Vec<u8> {
        loop {
            let mut buf = vec![0u8; self.max];
            self.rng.fill(buf.as_mut_slice());
            let q: f64 = self.rng.gen();
            let len = self.min + ((q * (self.max - self.min + 1) as f64) as usize).min(self.max - self.min);
            buf.truncate(len);
            if self.used.insert(buf.clone()) {
                return buf;
            }
        }
    }
}

/// Printable bytes, length uniform in `[mean/2, 3*mean/2]`.
pub fn gen_value(rng: &mut WorkloadRng, mean: usize) -> Vec<u8> {
    let len = rng.gen_range(mean / 2..=mean + mean / 2);
    (0..len).map(|_| rng.gen_range(b'!'..=b'~')).collect()
}

/// `n_records` entries with unique keys, in generation order.
pub fn gen_dataset(spec: &WorkloadSpec) -> Result<Vec<Entry>> {
    spec.validate()?;
    let mut keys = KeyGen::new(spec, 1);
    let mut values = rng(spec.seed ^ 0x05EE_D0F7_A1E5);
    Ok((0..spec.n_records)
        .map(|_| Entry::new(keys.next(), gen_value(&mut values, spec.value_len_mean)))
        .collect())
}

/// YCSB Zipfian generator over ranks `0..n` (rank 0 most popular).
#[derive(Debug, Clone)]
pub struct Zipfian {
    n: usize,
    theta: f64,
    alpha: f64,
    zetan: f64,
    eta: f64,
}

fn zeta(n: usize, theta: f64) -> f64 {
    (1..=n).map(|i| 1.0 / (i as f64).powf(theta)).sum()
}

impl Zipfian {
    pub fn new(n: usize, theta: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("zipfian needs at least one item"));
        }
        if !(0.0..1.0).contains(&theta) {
            return Err(Error::usage("zipf theta must lie in [0, 1)"));
        }
        let zetan = zeta(n, theta);
        let zeta2 = zeta(2.min(n), theta);
        let eta = if n > 2 {
            (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta2 / zetan)
        } else {
            1.0
        };
        Ok(Zipfian {
            n,
            theta,
            alpha: 1.0 / (1.0 - theta),
            zetan,
            eta,
        })
    }

    pub fn sample(&self, rng: &mut WorkloadRng) -> usize {
        let u: f64 = rng.gen();
        let uz = u * self.zetan;
        if uz < 1.0 {
            return 0;
        }
        if uz < 1.0 + 0.5f64.powf(self.theta) {
            return 1.min(self.n - 1);
        }
        let r = (self.n as f64 * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as usize;
        r.min(self.n - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Read(Vec<u8>),
    Write(Entry),
}

/// `n_ops` operations over `dataset`, grouped into batches of `batch_size`.
/// Keys are drawn by Zipfian rank over the dataset order.
pub fn gen_ops(spec: &WorkloadSpec, dataset: &[Entry], n_ops: usize) -> Result<Vec<Vec<Op>>> {
    spec.validate()?;
    if dataset.is_empty() || n_ops == 0 {
        return Ok(Vec::new());
    }
    let zipf = Zipfian::new(dataset.len(), spec.zipf_theta)?;
    let mut r = rng(spec.seed ^ 0x0b5_u64.wrapping_mul(0x1000_0000_01b3));
    let ops: Vec<Op> = (0..n_ops)
        .map(|_| {
            let key = dataset[zipf.sample(&mut r)].key.clone();
            if r.gen::<f64>() < spec.write_ratio {
                Op::Write(Entry::new(key, gen_value(&mut r, spec.value_len_mean)))
            } else {
                Op::Read(key)
            }
        })
        .collect();
    Ok(ops.chunks(spec.batch_size).map(<[Op]>::to_vec).collect())
}

/// Writes of one batch with duplicate keys collapsed (last write wins).
pub fn batch_writes(batch: &[Op]) -> Vec<Entry> {
    let mut map = std::collections::BTreeMap::new();
    for op in batch {
        if let Op::Write(e) = op {
            map.insert(e.key.clone(), e.value.clone());
        }
    }
    map.into_iter().map(|(k, v)| Entry::new(k, v)).collect()
}

/// `groups` datasets of `n_records` each: exactly `floor(overlap * n)`
/// entries are identical across all groups, the rest are private to a group.
pub fn gen_group_workloads(spec: &WorkloadSpec) -> Result<Vec<Vec<Entry>>> {
    spec.validate()?;
    let n = spec.n_records;
    let shared_n = (spec.overlap_ratio * n as f64).floor() as usize;
    let mut keys = KeyGen::new(spec, 2);
    let mut values = rng(spec.seed ^ 0x6A0_u64.wrapping_mul(0x2545_F491_4F6C_DD1D));
    let shared: Vec<Entry> = (0..shared_n)
        .map(|_| Entry::new(keys.next(), gen_value(&mut values, spec.value_len_mean)))
        .collect();
    Ok((0..spec.groups)
        .map(|_| {
            let mut g = shared.clone();
            g.extend(
                (shared_n..n).map(|_| Entry::new(keys.next(), gen_value(&mut values, spec.value_len_mean))),
            );
            g
        })
        .collect())
}

/// Order in which a version's edited range must be contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyOrder {
    /// Raw byte order of keys.
    Lexicographic,
    /// Bucket index first, then key: a contiguous range touches as few MBT
    /// buckets as possible.
    Bucketed { buckets: usize },
}

impl KeyOrder {
    pub fn sort(&self, entries: &mut [Entry]) {
        match *self {
            KeyOrder::Lexicographic => entries.sort_by(|a, b| a.key.cmp(&b.key)),
            KeyOrder::Bucketed { buckets } => {
                entries.sort_by_cached_key(|e| (bucket_of(&e.key, buckets), e.key.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Each version rewrites the values of `alpha * |R|` existing records.
    Update,
    /// Each version adds `alpha * |R|` new records.
    Insert,
}

/// A base record set plus one edit batch per later version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlphaVersions {
    pub base: Vec<Entry>,
    pub edits: Vec<Vec<Entry>>,
}

/// Edits covering a contiguous range (in `order`) of `floor(alpha * |R|)`
/// records per version. For `Insert`, `pool` supplies both the base and the
/// inserted records; blocks are held out so that each is contiguous among the
/// keys present when it is inserted.
pub fn gen_alpha_versions(
    pool: &[Entry],
    alpha: f64,
    n_versions: usize,
    scenario: Scenario,
    order: KeyOrder,
    seed: u64,
) -> Result<AlphaVersions> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage("alpha must lie in [0, 1]"));
    }
    let mut r = rng(seed ^ 0xA1FA);
    let mut sorted = pool.to_vec();
    order.sort(&mut sorted);
    let n_edits = n_versions.saturating_sub(1);
    match scenario {
        Scenario::Update => {
            let n = sorted.len();
            let d = (alpha * n as f64).floor() as usize;
            let mut current = sorted.clone();
            let mut edits = Vec::with_capacity(n_edits);
            for _ in 0..n_edits {
                let start = r.gen_range(0..=n - d);
                let batch: Vec<Entry> = current[start..start + d]
                    .iter()
                    .map(|e| {
                        let mut v = e.value.clone();
                        mutate_value(&mut r, &mut v);
                        Entry::new(e.key.clone(), v)
                    })
                    .collect();
                for (slot, e) in current[start..start + d].iter_mut().zip(&batch) {
                    slot.value = e.value.clone();
                }
                edits.push(batch);
            }
            Ok(AlphaVersions { base: sorted, edits })
        }
        Scenario::Insert => {
            // Largest base whose growth chain fits in the pool.
            let sizes = |base: usize| {
                let mut blocks = Vec::with_capacity(n_edits);
                let mut n = base;
                for _ in 0..n_edits {
                    let d = (alpha * n as f64).floor() as usize;
                    blocks.push(d);
                    n += d;
                }
                (n, blocks)
            };
            let mut base = ((sorted.len() as f64) / (1.0 + alpha).powi(n_edits as i32)) as usize;
            while base > 0 && sizes(base).0 > sorted.len() {
                base -= 1;
            }
            let (total, blocks) = sizes(base);
            let mut gaps: Vec<(usize, usize)> = blocks.iter().enumerate().map(|(i, _)| (r.gen_range(0..=base), i)).collect();
            gaps.sort();
            let mut assigned: Vec<Vec<Entry>> = vec![Vec::new(); blocks.len()];
            let mut base_entries = Vec::with_capacity(base);
            let mut it = sorted.into_iter().take(total);
            let mut g = gaps.iter().peekable();
            for b in 0..=base {
                while let Some(&&(gap, i)) = g.peek() {
                    if gap != b {
                        break;
                    }
                    assigned[i] = it.by_ref().take(blocks[i]).collect();
                    g.next();
                }
                if b < base {
                    base_entries.extend(it.next());
                }
            }
            Ok(AlphaVersions {
                base: base_entries,
                edits: assigned,
            })
        }
    }
}

/// Replaces the value with fresh printable bytes of the same length.
fn mutate_value(r: &mut WorkloadRng, v: &mut Vec<u8>) {
    let old = v.clone();
    loop {
        for b in v.iter_mut() {
            *b = r.gen_range(b'!'..=b'~');
        }
        if *v != old || v.is_empty() {
            break;
        }
    }
    if v.is_empty() {
        v.push(b'!');
    }
}

pub fn shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut rng(seed));
}

/// Reads `key<TAB>value-base64` lines. Blank lines are skipped.
pub fn read_records(reader: impl BufRead) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::usage(format!("line {}: missing tab", n + 1)))?;
        let value = base64::engine::general_purpose::STANDARD
            .decode(value.trim_end())
            .map_err(|e| Error::usage(format!("line {}: {e}", n + 1)))?;
        out.push(Entry::new(key.as_bytes(), value));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_unique() {
        let spec = WorkloadSpec {
            n_records: 2000,
            ..Default::default()
        };
        let a = gen_dataset(&spec).unwrap();
        assert_eq!(a, gen_dataset(&spec).unwrap());
        let keys: HashSet<_> = a.iter().map(|e| &e.key).collect();
        assert_eq!(keys.len(), 2000);
        assert!(a.iter().all(|e| (5..=15).contains(&e.key.len())));
        let mean = a.iter().map(|e| e.value.len()).sum::<usize>() as f64 / 2000.0;
        assert!((mean - 256.0).abs() < 10.0);
        assert!(gen_dataset(&WorkloadSpec { n_records: 0, ..spec }).unwrap().is_empty());
    }

    #[test]
    fn key_lengths_pass_chi_square() {
        let spec = WorkloadSpec {
            n_records: 100_000,
            value_len_mean: 2,
            ..Default::default()
        };
        let mut counts = [0f64; 11];
        for e in gen_dataset(&spec).unwrap() {
            counts[e.key.len() - 5] += 1.0;
        }
        let expected = 100_000.0 / 11.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 10 degrees of freedom; the 0.999 quantile is 29.6.
        assert!(chi2 < 29.6, "chi2 {chi2}");
    }

    #[test]
    fn zipf_skew_grows_with_theta() {
        let share = |theta: f64| {
            let z = Zipfian::new(10_000, theta).unwrap();
            let mut r = rng(9);
            let hits = (0..200_000).filter(|_| z.sample(&mut r) < 100).count();
            hits as f64 / 200_000.0
        };
        let (u, m, h) = (share(0.0), share(0.5), share(0.9));
        assert!((u - 0.01).abs() < 0.003, "uniform top-1% share {u}");
        assert!(u < m && m < h, "{u} {m} {h}");
        assert!(h > 0.3);
    }

    #[test]
    fn read_only_ops() {
        let spec = WorkloadSpec {
            n_records: 100,
            write_ratio: 0.0,
            batch_size: 7,
            ..Default::default()
        };
        let data = gen_dataset(&spec).unwrap();
        let batches = gen_ops(&spec, &data, 50).unwrap();
        assert_eq!(batches.len(), 8);
        assert!(batches.iter().flatten().all(|op| matches!(op, Op::Read(_))));
    }

    #[test]
    fn group_overlap_is_exact() {
        for (overlap, expect) in [(0.5, 500), (1.0, 1000), (0.0, 0)] {
            let spec = WorkloadSpec {
                n_records: 1000,
                overlap_ratio: overlap,
                groups: 10,
                ..Default::default()
            };
            let groups = gen_group_workloads(&spec).unwrap();
            let sets: Vec<HashSet<Entry>> = groups.iter().map(|g| g.iter().cloned().collect()).collect();
            let common = sets.iter().skip(1).fold(sets[0].clone(), |acc, s| &acc & s);
            assert_eq!(common.len(), expect);
            let keys0: HashSet<_> = groups[0].iter().map(|e| e.key.clone()).collect();
            let keys1: HashSet<_> = groups[1].iter().map(|e| e.key.clone()).collect();
            assert_eq!(keys0.intersection(&keys1).count(), expect);
        }
    }

    fn is_contiguous(sorted: &[Entry], edited: &[Entry]) -> bool {
        let keys: HashSet<_> = edited.iter().map(|e| &e.key).collect();
        let pos: Vec<usize> = sorted.iter().enumerate().filter(|(_, e)| keys.contains(&e.key)).map(|(i, _)| i).collect();
        pos.len() == edited.len() && pos.windows(2).all(|w| w[1] == w[0] + 1)
    }

    #[test]
    fn alpha_versions_are_contiguous() {
        let pool = gen_dataset(&WorkloadSpec {
            n_records: 3000,
            ..Default::default()
        })
        .unwrap();
        for order in [KeyOrder::Lexicographic, KeyOrder::Bucketed { buckets: 64 }] {
            let v = gen_alpha_versions(&pool, 0.25, 4, Scenario::Update, order, 1).unwrap();
            assert_eq!(v.edits.len(), 3);
            for e in &v.edits {
                assert_eq!(e.len(), 750);
                assert!(is_contiguous(&v.base, e));
            }
            let v = gen_alpha_versions(&pool, 0.2, 3, Scenario::Insert, order, 1).unwrap();
            let mut present = v.base.clone();
            for e in &v.edits {
                assert_eq!(e.len(), (present.len() as f64 * 0.2).floor() as usize);
                present.extend(e.iter().cloned());
                order.sort(&mut present);
                assert!(is_contiguous(&present, e));
            }
        }
        let v = gen_alpha_versions(&pool, 1.0, 2, Scenario::Update, KeyOrder::Lexicographic, 3).unwrap();
        assert!(v.edits[0].iter().zip(&v.base).all(|(a, b)| a.key == b.key && a.value != b.value));
        let v = gen_alpha_versions(&pool, 0.0, 3, Scenario::Update, KeyOrder::Lexicographic, 3).unwrap();
        assert!(v.edits.iter().all(Vec::is_empty));
    }

    #[test]
    fn ingestion_format() {
        let text = "alpha\taGVsbG8=\n\nbeta\t\n";
        let rows = read_records(text.as_bytes()).unwrap();
        assert_eq!(rows, vec![Entry::new("alpha", "hello"), Entry::new("beta", "")]);
        assert!(read_records("nokey".as_bytes()).is_err());
    }
}
