//! Content-defined boundary detection.
//!
//! Leaves of the POS-Tree are cut where a Rabin fingerprint over a sliding
//! window of the serialized entry stream matches a bit pattern. Internal
//! layers skip the rolling hash and test the child digests directly
//! ([`hash_matches`]).
//!
//! The fingerprint is the window's bytes read as a polynomial over GF(2),
//! reduced modulo [`POLYNOMIAL`] (degree 53, irreducible). Bytes before the
//! start of the stream count as zeros.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::store::NodeId;

/// Irreducible polynomial of degree 53 over GF(2).
pub const POLYNOMIAL: u64 = 0x3DA3358B4DC173;

const fn degree(p: u64) -> u32 {
    63 - p.leading_zeros()
}

const POL_DEGREE: u32 = degree(POLYNOMIAL);
const POL_SHIFT: u32 = POL_DEGREE - 8;

/// Largest pattern width usable against a rolling fingerprint.
pub const MAX_ROLLING_PATTERN_BITS: u32 = POL_DEGREE;

pub(crate) fn poly_mod(mut x: u64, p: u64) -> u64 {
    let dp = degree(p);
    while x != 0 && degree(x) >= dp {
        x ^= p << (degree(x) - dp);
    }
    x
}

pub(crate) fn append_byte(hash: u64, b: u8, p: u64) -> u64 {
    poly_mod((hash << 8) | b as u64, p)
}

struct Tables {
    out: [u64; 256],
    reduce: [u64; 256],
}

impl Tables {
    fn build(window: usize) -> Self {
        let mut out = [0u64; 256];
        let mut reduce = [0u64; 256];
        for b in 0..256usize {
            let mut h = append_byte(0, b as u8, POLYNOMIAL);
            for _ in 1..window {
                h = append_byte(h, 0, POLYNOMIAL);
            }
            out[b] = h;
            let top = (b as u64) << POL_DEGREE;
            reduce[b] = poly_mod(top, POLYNOMIAL) | top;
        }
        Tables { out, reduce }
    }

    fn for_window(window: usize) -> Arc<Tables> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Tables>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().unwrap();
        guard
            .entry(window)
            .or_insert_with(|| Arc::new(Tables::build(window)))
            .clone()
    }
}

/// Parameters of the boundary rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkConfig {
    /// Width of the rolling window in bytes.
    pub window_bytes: usize,
    /// Number of low-order fingerprint bits compared against the pattern.
    pub pattern_bits: u32,
    pub pattern_value: u64,
    /// A boundary is forced once a chunk reaches this many bytes.
    pub max_chunk_bytes: usize,
    /// Pattern matches closer than this to the previous boundary are ignored.
    pub min_chunk_bytes: usize,
}

impl ChunkConfig {
    pub fn new(pattern_bits: u32) -> Self {
        ChunkConfig {
            window_bytes: 67,
            pattern_bits,
            pattern_value: 1 & mask_for(pattern_bits.min(64)),
            max_chunk_bytes: 16usize << pattern_bits.min(40),
            min_chunk_bytes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_bytes == 0 {
            return Err(Error::usage("window_bytes must be positive"));
        }
        if self.pattern_bits > 256 {
            return Err(Error::usage("pattern_bits must be at most 256"));
        }
        if self.pattern_bits < 64 && self.pattern_value >> self.pattern_bits != 0 {
            return Err(Error::usage("pattern_value does not fit in pattern_bits"));
        }
        if self.max_chunk_bytes == 0 || self.min_chunk_bytes >= self.max_chunk_bytes {
            return Err(Error::usage("require min_chunk_bytes < max_chunk_bytes"));
        }
        Ok(())
    }

    fn validate_rolling(&self) -> Result<()> {
        self.validate()?;
        if self.pattern_bits > MAX_ROLLING_PATTERN_BITS {
            return Err(Error::usage(format!(
                "rolling patterns are limited to {MAX_ROLLING_PATTERN_BITS} bits"
            )));
        }
        Ok(())
    }

    fn mask(&self) -> u64 {
        mask_for(self.pattern_bits)
    }
}

fn mask_for(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Rolling Rabin fingerprint over the last `window` bytes.
struct Rabin {
    tables: Arc<Tables>,
    window: Vec<u8>,
    wpos: usize,
    digest: u64,
}

impl Rabin {
    fn new(window: usize) -> Self {
        Rabin {
            tables: Tables::for_window(window),
            window: vec![0; window],
            wpos: 0,
            digest: 0,
        }
    }

    fn reset(&mut self) {
        self.window.fill(0);
        self.wpos = 0;
        self.digest = 0;
    }

    #[inline]
    fn roll(&mut self, b: u8) -> u64 {
        let out = std::mem::replace(&mut self.window[self.wpos], b);
        self.wpos += 1;
        if self.wpos == self.window.len() {
            self.wpos = 0;
        }
        let mut d = self.digest ^ self.tables.out[out as usize];
        let index = (d >> POL_SHIFT) as usize;
        d = ((d << 8) | b as u64) ^ self.tables.reduce[index];
        self.digest = d;
        d
    }
}

/// Byte-level boundaries of `data`: ascending cut offsets, always ending with
/// `data.len()` when `data` is non-empty.
pub fn boundaries(data: &[u8], cfg: &ChunkConfig) -> Result<Vec<usize>> {
    cfg.validate_rolling()?;
    let mut out = Vec::new();
    if data.is_empty() {
        return Ok(out);
    }
    let (mask, w) = (cfg.mask(), cfg.window_bytes);
    let mut rabin = Rabin::new(w);
    let mut last = 0;
    for (i, &b) in data.iter().enumerate() {
        let fp = rabin.roll(b);
        let o = i + 1;
        let len = o - last;
        if (o >= w && len >= cfg.min_chunk_bytes && fp & mask == cfg.pattern_value)
            || len >= cfg.max_chunk_bytes
        {
            out.push(o);
            last = o;
        }
    }
    if last != data.len() {
        out.push(data.len());
    }
    Ok(out)
}

/// Boundaries restricted to item ends: a cut is placed after the item in which
/// a qualifying pattern occurred, or after the item that brings the chunk to
/// `max_chunk_bytes`. `item_ends` must be ascending and end at `data.len()`.
pub fn aligned_boundaries(
    data: &[u8],
    item_ends: &[usize],
    cfg: &ChunkConfig,
) -> Result<Vec<usize>> {
    cfg.validate_rolling()?;
    if item_ends.last().copied().unwrap_or(0) != data.len()
        || item_ends.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::usage("item ends must ascend to the data length"));
    }
    let (mask, w) = (cfg.mask(), cfg.window_bytes);
    let mut rabin = Rabin::new(w);
    let mut out = Vec::new();
    let (mut start, mut pos, mut found) = (0, 0, false);
    for &end in item_ends {
        while pos < end {
            let fp = rabin.roll(data[pos]);
            pos += 1;
            if !found && pos >= w && pos - start >= cfg.min_chunk_bytes && fp & mask == cfg.pattern_value
            {
                found = true;
            }
        }
        if found || end - start >= cfg.max_chunk_bytes || end == data.len() {
            out.push(end);
            start = end;
            found = false;
        }
    }
    Ok(out)
}

/// Why a streaming chunker closed a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cut {
    None,
    Pattern,
    Forced,
}

/// Item-at-a-time form of [`aligned_boundaries`] whose window restarts at
/// every boundary. With `min_chunk_bytes >= window_bytes` the two agree,
/// because a qualifying window never reaches back past the chunk start.
pub struct ItemChunker {
    cfg: ChunkConfig,
    mask: u64,
    rabin: Rabin,
    chunk_len: usize,
}

impl ItemChunker {
    pub fn new(cfg: &ChunkConfig) -> Result<Self> {
        cfg.validate_rolling()?;
        if cfg.min_chunk_bytes < cfg.window_bytes {
            return Err(Error::usage(
                "item chunking requires min_chunk_bytes >= window_bytes",
            ));
        }
        Ok(ItemChunker {
            mask: cfg.mask(),
            rabin: Rabin::new(cfg.window_bytes),
            cfg: cfg.clone(),
            chunk_len: 0,
        })
    }

    /// Bytes accumulated since the last boundary.
    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    /// Does `item` contain a qualifying pattern position? Advances the chunk
    /// length by the whole item either way.
    pub fn scan(&mut self, item: &[u8]) -> bool {
        let w = self.cfg.window_bytes;
        let mut len = self.chunk_len;
        let mut found = false;
        for &b in item {
            let fp = self.rabin.roll(b);
            len += 1;
            if len >= w && len >= self.cfg.min_chunk_bytes && fp & self.mask == self.cfg.pattern_value {
                // Remaining bytes of the item cannot move the boundary.
                found = true;
                break;
            }
        }
        self.chunk_len += item.len();
        found
    }

    /// Feeds one item; on a cut the chunker restarts for the next chunk.
    pub fn push(&mut self, item: &[u8]) -> Cut {
        let cut = if self.scan(item) {
            Cut::Pattern
        } else if self.chunk_len >= self.cfg.max_chunk_bytes {
            Cut::Forced
        } else {
            Cut::None
        };
        if cut != Cut::None {
            self.reset();
        }
        cut
    }

    pub fn reset(&mut self) {
        self.rabin.reset();
        self.chunk_len = 0;
    }
}

/// True iff the low `pattern_bits` bits of `id` (read as a big-endian integer)
/// equal `pattern_value`. Bits above 64 compare against zero.
pub fn hash_matches(id: &NodeId, cfg: &ChunkConfig) -> bool {
    let bytes = id.as_bytes();
    (0..cfg.pattern_bits.min(256)).all(|i| {
        let digest_bit = (bytes[31 - (i / 8) as usize] >> (i % 8)) & 1;
        let pattern_bit = if i < 64 {
            ((cfg.pattern_value >> i) & 1) as u8
        } else {
            0
        };
        digest_bit == pattern_bit
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    /// Carry-less multiply modulo `p`.
    fn mul_mod(a: u64, b: u64, p: u64) -> u64 {
        let mut acc: u128 = 0;
        for i in 0..64 {
            if (b >> i) & 1 == 1 {
                acc ^= (a as u128) << i;
            }
        }
        let dp = degree(p);
        let p = p as u128;
        while acc != 0 && 127 - acc.leading_zeros() >= dp {
            acc ^= p << (127 - acc.leading_zeros() - dp);
        }
        acc as u64
    }

    #[test]
    fn polynomial_is_irreducible() {
        // Degree 53 is prime: irreducible iff x^(2^53) = x (mod P) and P has no
        // linear factor.
        assert_eq!(POL_DEGREE, 53);
        let mut x = 2u64;
        for _ in 0..53 {
            x = mul_mod(x, x, POLYNOMIAL);
        }
        assert_eq!(x, 2);
        assert_eq!(POLYNOMIAL & 1, 1, "x divides P");
        assert_eq!(POLYNOMIAL.count_ones() % 2, 1, "x+1 divides P");
    }

    /// Fingerprint of the window ending at `o`, recomputed from scratch.
    fn naive_fp(data: &[u8], o: usize, w: usize) -> u64 {
        data[o.saturating_sub(w)..o]
            .iter()
            .fold(0, |h, &b| append_byte(h, b, POLYNOMIAL))
    }

    fn naive_boundaries(data: &[u8], cfg: &ChunkConfig) -> Vec<usize> {
        let mask = cfg.mask();
        let mut out = vec![];
        let mut last = 0;
        for o in 1..=data.len() {
            let len = o - last;
            let hit = o >= cfg.window_bytes
                && len >= cfg.min_chunk_bytes
                && naive_fp(data, o, cfg.window_bytes) & mask == cfg.pattern_value;
            if hit || len >= cfg.max_chunk_bytes {
                out.push(o);
                last = o;
            }
        }
        if last != data.len() {
            out.push(data.len());
        }
        out
    }

    fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut v = vec![0u8; n];
        rng.fill_bytes(&mut v);
        v
    }

    #[test]
    fn empty_and_short_inputs() {
        let cfg = ChunkConfig::new(8);
        assert!(boundaries(&[], &cfg).unwrap().is_empty());
        let short = random_bytes(40, 1);
        assert_eq!(boundaries(&short, &cfg).unwrap(), vec![40]);
    }

    #[test]
    fn rolling_matches_naive_oracle() {
        for (seed, min, max) in [(3u64, 0usize, 4096usize), (4, 100, 600), (5, 0, 90)] {
            let data = random_bytes(20_000, seed);
            let cfg = ChunkConfig {
                min_chunk_bytes: min,
                max_chunk_bytes: max,
                ..ChunkConfig::new(8)
            };
            assert_eq!(boundaries(&data, &cfg).unwrap(), naive_boundaries(&data, &cfg));
        }
    }

    #[test]
    fn mean_chunk_length_tracks_pattern_width() {
        let data = random_bytes(64 * 1024, 9);
        let cfg = ChunkConfig::new(8);
        let cuts = boundaries(&data, &cfg).unwrap();
        assert_eq!(cuts, naive_boundaries(&data, &cfg));
        let mean = data.len() as f64 / cuts.len() as f64;
        assert!((192.0..=320.0).contains(&mean), "mean chunk {mean}");
    }

    #[test]
    fn edits_resynchronize() {
        let data = random_bytes(50_000, 11);
        let cfg = ChunkConfig::new(8);
        let before = boundaries(&data, &cfg).unwrap();
        let (a, b) = (20_000, 20_010);
        let mut edited = data.clone();
        for x in &mut edited[a..b] {
            *x ^= 0x5a;
        }
        let after = boundaries(&edited, &cfg).unwrap();
        let prefix = |v: &[usize]| v.iter().copied().filter(|&o| o < a).collect::<Vec<_>>();
        assert_eq!(prefix(&before), prefix(&after));
        let first_shared = after
            .iter()
            .copied()
            .find(|o| *o >= b + cfg.window_bytes && before.contains(o))
            .expect("resync point");
        let tail = |v: &[usize]| v.iter().copied().filter(|&o| o >= first_shared).collect::<Vec<_>>();
        assert_eq!(tail(&before), tail(&after));
    }

    #[test]
    fn prefix_boundaries_stable_under_extension() {
        let data = random_bytes(30_000, 12);
        let cfg = ChunkConfig::new(7);
        let full = boundaries(&data, &cfg).unwrap();
        let cut = full[full.len() / 2];
        let prefix = boundaries(&data[..cut], &cfg).unwrap();
        assert_eq!(prefix, full.iter().copied().take_while(|&o| o <= cut).collect::<Vec<_>>());
    }

    #[test]
    fn item_chunker_agrees_with_aligned_boundaries() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(13);
        let cfg = ChunkConfig {
            min_chunk_bytes: 128,
            max_chunk_bytes: 2048,
            ..ChunkConfig::new(8)
        };
        let mut data = vec![];
        let mut ends = vec![];
        let mut items = vec![];
        for _ in 0..400 {
            let n = rng.gen_range(1..200);
            let item = random_bytes(n, rng.gen());
            data.extend_from_slice(&item);
            ends.push(data.len());
            items.push(item);
        }
        let expect = aligned_boundaries(&data, &ends, &cfg).unwrap();
        let mut ch = ItemChunker::new(&cfg).unwrap();
        let mut got = vec![];
        let mut pos = 0;
        for item in &items {
            pos += item.len();
            if ch.push(item) != Cut::None {
                got.push(pos);
            }
        }
        if got.last() != Some(&pos) {
            got.push(pos);
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn hash_pattern_matching() {
        let mut bytes = [0xabu8; 32];
        bytes[31] = 0x01;
        let id = NodeId::from_bytes(bytes);
        let cfg = |q: u32, v: u64| ChunkConfig {
            pattern_bits: q,
            pattern_value: v,
            ..ChunkConfig::new(8)
        };
        assert!(hash_matches(&id, &cfg(8, 0x01)));
        assert!(!hash_matches(&id, &cfg(8, 0x02)));
        assert!(hash_matches(&id, &cfg(0, 0)));
        let zero = NodeId::from_bytes({
            let mut z = [0u8; 32];
            z[31] = 5;
            z
        });
        assert!(hash_matches(&zero, &cfg(256, 5)));
        assert!(!hash_matches(&id, &cfg(256, 0x01)));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ChunkConfig::new(8);
        cfg.pattern_value = 256;
        assert!(cfg.validate().is_err());
        let cfg = ChunkConfig {
            min_chunk_bytes: 10,
            max_chunk_bytes: 10,
            ..ChunkConfig::new(8)
        };
        assert!(boundaries(b"x", &cfg).is_err());
        let cfg = ChunkConfig::new(60);
        assert!(boundaries(b"x", &cfg).is_err());
    }
}
