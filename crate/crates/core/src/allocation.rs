//! Token → embedding-count allocation.
//!
//! [`count_codewords`] grows an LZW-style dictionary of token tuples over a
//! corpus, and [`allocate`] grants extra embeddings to the final token of each
//! codeword in descending frequency order, subject to a per-token cap. The
//! resulting [`AllocationTable`] is the static router of an L³ layer: token `t`
//! owns rows `bounds[t]..bounds[t+1]` of the flat key/value tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{bail, L3Error, Result};
use crate::par;

const MAGIC: &[u8; 4] = b"L3AL";
const VERSION: u32 = 1;

/// Cap value meaning "no per-token limit".
pub const UNCAPPED: u32 = u32::MAX;

/// Dictionary-growth rule used while counting codewords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountingAlgo {
    /// Greedy non-overlapping longest-match segmentation (the runnable reference listing).
    #[default]
    Appendix,
    /// Per-position longest known suffix (the pseudocode formulation).
    Pseudocode,
}

impl std::str::FromStr for CountingAlgo {
    type Err = L3Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appendix" => Ok(CountingAlgo::Appendix),
            "pseudocode" => Ok(CountingAlgo::Pseudocode),
            other => Err(L3Error::Config(format!("unknown counting algorithm {other:?}"))),
        }
    }
}

/// Codeword (token tuple) → occurrence count, in dictionary insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodewordCounter {
    vocab_size: usize,
    entries: IndexMap<Vec<u32>, u64>,
}

impl CodewordCounter {
    /// Counter holding every single-token codeword with count 0.
    pub fn new(vocab_size: usize) -> Self {
        let mut entries = IndexMap::with_capacity(vocab_size);
        for t in 0..vocab_size as u32 {
            entries.insert(vec![t], 0);
        }
        CodewordCounter {
            vocab_size,
            entries,
        }
    }

    /// Build from explicit `(codeword, count)` pairs appended after the singles.
    /// Singles listed in `entries` overwrite their zero count in place.
    pub fn from_entries(vocab_size: usize, entries: &[(Vec<u32>, u64)]) -> Result<Self> {
        let mut c = Self::new(vocab_size);
        for (w, n) in entries {
            if w.is_empty() || w.iter().any(|&t| t as usize >= vocab_size) {
                bail!(Index, "codeword {:?} invalid for vocab {}", w, vocab_size);
            }
            if w.len() > 1 && !c.entries.contains_key(&w[..w.len() - 1]) {
                bail!(Invariant, "prefix of codeword {:?} missing", w);
            }
            c.entries.insert(w.clone(), *n);
        }
        Ok(c)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, codeword: &[u32]) -> Option<u64> {
        self.entries.get(codeword).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u32], u64)> {
        self.entries.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    fn check_ids(&self, toks: &[u32]) -> Result<()> {
        if let Some(&bad) = toks.iter().find(|&&t| t as usize >= self.vocab_size) {
            bail!(Index, "token {} out of range for vocab {}", bad, self.vocab_size);
        }
        Ok(())
    }

    /// Scan one line of tokens, growing the dictionary.
    pub fn update(&mut self, toks: &[u32], algo: CountingAlgo) -> Result<()> {
        self.check_ids(toks)?;
        match algo {
            CountingAlgo::Appendix => self.update_appendix(toks),
            CountingAlgo::Pseudocode => self.update_pseudocode(toks),
        }
        Ok(())
    }

    fn update_appendix(&mut self, toks: &[u32]) {
        let n = toks.len();
        let mut last = 0;
        let mut cur = 1;
        while cur < n {
            while cur < n && self.entries.contains_key(&toks[last..cur]) {
                cur += 1;
            }
            if cur > last + 1 {
                *self.entries.get_mut(&toks[last..cur - 1]).expect("matched window is known") += 1;
                // Assignment keeps an existing key's position and resets its count.
                self.entries.insert(toks[last..cur].to_vec(), 1);
            }
            last = cur;
            cur += 1;
        }
    }

    fn update_pseudocode(&mut self, toks: &[u32]) {
        for i in 0..toks.len() {
            let mut j = 0;
            while j <= i && self.entries.contains_key(&toks[i - j..=i]) {
                j += 1;
            }
            if j > 0 {
                *self.entries.get_mut(&toks[i + 1 - j..=i]).expect("suffix is known") += 1;
            }
            if j <= i {
                self.entries.insert(toks[i - j..=i].to_vec(), 1);
            }
        }
    }

    /// Sum codeword counts of `other` into `self`; new codewords are appended in
    /// `other`'s insertion order.
    pub fn merge(&mut self, other: &CodewordCounter) {
        for (k, &v) in &other.entries {
            *self.entries.entry(k.clone()).or_insert(0) += v;
        }
    }

    /// Entries sorted by descending count, ties kept in insertion order.
    pub fn sorted_desc(&self) -> Vec<(&[u32], u64)> {
        let mut v: Vec<(&[u32], u64)> = self.iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1));
        v
    }
}

/// Count codewords over a sequence of token lines sharing one dictionary.
pub fn count_codewords<S: AsRef<[u32]>>(
    lines: &[S],
    vocab_size: usize,
    algo: CountingAlgo,
) -> Result<CodewordCounter> {
    let mut c = CodewordCounter::new(vocab_size);
    for line in lines {
        c.update(line.as_ref(), algo)?;
    }
    Ok(c)
}

/// Approximate sharded counting: each shard grows its own dictionary and the
/// counts are summed. Differs from [`count_codewords`] because the dictionaries
/// no longer see each other's growth.
pub fn count_codewords_sharded<S: AsRef<[u32]> + Sync>(
    lines: &[S],
    vocab_size: usize,
    algo: CountingAlgo,
    shards: usize,
) -> Result<CodewordCounter> {
    let shards = shards.max(1);
    let per = lines.len().div_ceil(shards).max(1);
    let parts: Vec<Result<CodewordCounter>> = par::map_range(shards, |s| {
        let lo = (s * per).min(lines.len());
        let hi = ((s + 1) * per).min(lines.len());
        count_codewords(&lines[lo..hi], vocab_size, algo)
    });
    let mut total = CodewordCounter::new(vocab_size);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Per-token embedding counts and their prefix sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationTable {
    vocab_size: usize,
    total: u64,
    cap: u32,
    counts: Vec<u32>,
    bounds: Vec<u64>,
}

impl AllocationTable {
    /// Build from per-token counts, validating every invariant.
    pub fn from_counts(counts: Vec<u32>, cap: u32) -> Result<Self> {
        if counts.is_empty() {
            bail!(Invariant, "allocation over an empty vocabulary");
        }
        if cap == 0 {
            bail!(Invariant, "cap must be at least 1");
        }
        let mut bounds = Vec::with_capacity(counts.len() + 1);
        bounds.push(0u64);
        for (t, &d) in counts.iter().enumerate() {
            if d == 0 || d > cap {
                bail!(Invariant, "token {} has {} embeddings, allowed 1..={}", t, d, cap);
            }
            bounds.push(bounds[t] + d as u64);
        }
        Ok(AllocationTable {
            vocab_size: counts.len(),
            total: bounds[counts.len()],
            cap,
            counts,
            bounds,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Total embeddings `v`.
    pub fn total(&self) -> usize {
        self.total as usize
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn bounds(&self) -> &[u64] {
        &self.bounds
    }

    pub fn count(&self, token: u32) -> usize {
        self.counts[token as usize] as usize
    }

    /// Embedding rows owned by `token`.
    pub fn range(&self, token: u32) -> std::ops::Range<usize> {
        let t = token as usize;
        self.bounds[t] as usize..self.bounds[t + 1] as usize
    }

    /// Largest per-token count actually present (the effective cap).
    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.counts.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&self.total.to_le_bytes());
        out.extend_from_slice(&self.cap.to_le_bytes());
        for &d in &self.counts {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        fill(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "not an allocation file (bad magic)");
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        fill(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            bail!(Format, "unsupported allocation version {}", version);
        }
        fill(&mut r, &mut b4)?;
        let vocab = u32::from_le_bytes(b4) as usize;
        fill(&mut r, &mut b8)?;
        let total = u64::from_le_bytes(b8);
        fill(&mut r, &mut b4)?;
        let cap = u32::from_le_bytes(b4);
        let expected = 24 + 4 * vocab;
        if bytes.len() != expected {
            bail!(Format, "allocation file is {} bytes, expected {}", bytes.len(), expected);
        }
        let counts = (0..vocab)
            .map(|_| {
                fill(&mut r, &mut b4)?;
                Ok(u32::from_le_bytes(b4))
            })
            .collect::<Result<Vec<u32>>>()?;
        let table = Self::from_counts(counts, cap)?;
        if table.total != total {
            bail!(Invariant, "stored total {} but counts sum to {}", total, table.total);
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn fill(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| L3Error::Format("allocation file truncated".into()))
}

/// Grant embeddings to codeword-final tokens in descending codeword frequency
/// until `v` embeddings exist, never exceeding `k` per token.
pub fn allocate(counter: &CodewordCounter, v: usize, k: u32) -> Result<AllocationTable> {
    let vocab = counter.vocab_size();
    if v < vocab {
        bail!(Config, "target v = {} below vocab size {}", v, vocab);
    }
    if k == 0 {
        bail!(Config, "cap k must be at least 1");
    }
    let mut counts = vec![1u32; vocab];
    let mut n_alloc = vocab;
    let ranked = counter.sorted_desc();
    let mut i = 0;
    while n_alloc < v {
        let Some((w, _)) = ranked.get(i) else {
            bail!(
                AllocationInfeasible,
                "codewords exhausted after granting {} of {} embeddings (cap {})",
                n_alloc,
                v,
                k
            );
        };
        let t = *w.last().expect("codewords are non-empty") as usize;
        if counts[t] < k {
            counts[t] += 1;
            n_alloc += 1;
        }
        i += 1;
    }
    AllocationTable::from_counts(counts, k)
}

/// `per_token` embeddings for every token.
pub fn uniform_allocate(vocab_size: usize, per_token: u32) -> Result<AllocationTable> {
    if per_token == 0 {
        bail!(Config, "per-token count must be at least 1");
    }
    AllocationTable::from_counts(vec![per_token; vocab_size], per_token)
}

/// Summary of an allocation's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationStats {
    pub vocab_size: usize,
    pub total: usize,
    pub cap: u32,
    pub histogram: BTreeMap<u32, usize>,
    pub max: u32,
    pub min: u32,
    pub mean: f64,
    pub at_cap: usize,
    /// `(ln rank, ln count)` with ranks 1-based over counts sorted descending.
    pub zipf: Vec<(f64, f64)>,
}

impl AllocationStats {
    /// Worst-case L³ embedding parameters touched by one token.
    pub fn worst_case_active_params(&self, d_in: usize, d_emb: usize) -> usize {
        self.max as usize * (d_in + d_emb)
    }
}

pub fn allocation_stats(table: &AllocationTable) -> AllocationStats {
    let mut histogram = BTreeMap::new();
    for &d in table.counts() {
        *histogram.entry(d).or_insert(0) += 1;
    }
    let mut sorted = table.counts().to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let zipf = sorted
        .iter()
        .enumerate()
        .map(|(r, &d)| (((r + 1) as f64).ln(), (d as f64).ln()))
        .collect();
    AllocationStats {
        vocab_size: table.vocab_size(),
        total: table.total(),
        cap: table.cap(),
        histogram,
        max: table.max_count(),
        min: table.counts().iter().copied().min().unwrap_or(0),
        mean: table.total() as f64 / table.vocab_size() as f64,
        at_cap: table.counts().iter().filter(|&&d| d == table.cap()).count(),
        zipf,
    }
}
