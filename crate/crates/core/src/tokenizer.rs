//! Byte-level BPE tokenizer.
//!
//! Ids `0..256` are raw bytes; every later id is a merge of two earlier ids.
//! No pre-tokenization: merges may span whitespace.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{bail, L3Error, Result};

const MAGIC: &[u8; 4] = b"L3TK";
const VERSION: u32 = 1;

/// A pair of token ids merged into a new token.
pub type Merge = (u32, u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    ranks: HashMap<Merge, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::bytes()
    }
}

const NIL: u32 = u32::MAX;

impl Tokenizer {
    /// The identity byte tokenizer (256 tokens, no merges).
    pub fn bytes() -> Self {
        Tokenizer {
            vocab: (0..=255u8).map(|b| vec![b]).collect(),
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn from_merges(merges: Vec<Merge>) -> Result<Self> {
        let mut tok = Self::bytes();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let n = tok.vocab.len() as u32;
            if a >= n || b >= n {
                bail!(Format, "merge {} references unknown token", i);
            }
            let mut bytes = tok.vocab[a as usize].clone();
            bytes.extend_from_slice(&tok.vocab[b as usize]);
            tok.vocab.push(bytes);
            tok.ranks.insert((a, b), i as u32);
        }
        tok.merges = merges;
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Greedy BPE training: repeatedly merge the most frequent adjacent pair
    /// (ties broken toward the smallest pair) until `target_vocab` tokens exist
    /// or no pair occurs at least twice.
    pub fn train(corpus: &[u8], target_vocab: usize) -> Result<Self> {
        if corpus.is_empty() {
            bail!(Training, "cannot train a tokenizer on an empty corpus");
        }
        if target_vocab < 256 {
            bail!(Config, "target vocab {} below the 256 byte tokens", target_vocab);
        }
        let mut seq = Sequence::new(corpus.iter().map(|&b| b as u32).collect());
        let mut merges = Vec::new();
        let mut counts: HashMap<Merge, i64> = HashMap::new();
        let mut positions: HashMap<Merge, Vec<u32>> = HashMap::new();
        for i in 0..seq.ids.len().saturating_sub(1) {
            let p = (seq.ids[i], seq.ids[i + 1]);
            *counts.entry(p).or_default() += 1;
            positions.entry(p).or_default().push(i as u32);
        }
        let mut heap: BinaryHeap<(i64, Reverse<Merge>)> =
            counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

        while 256 + merges.len() < target_vocab {
            let Some((c, Reverse(pair))) = heap.pop() else { break };
            let current = counts.get(&pair).copied().unwrap_or(0);
            if c != current {
                // stale heap entry
                if current > 0 {
                    heap.push((current, Reverse(pair)));
                }
                continue;
            }
            if c < 2 {
                break;
            }
            let new_id = (256 + merges.len()) as u32;
            merges.push(pair);
            let mut occ = positions.remove(&pair).unwrap_or_default();
            occ.sort_unstable();
            let mut touched: HashMap<Merge, ()> = HashMap::new();
            for pos in occ {
                let i = pos;
                if !seq.alive(i) || seq.ids[i as usize] != pair.0 {
                    continue;
                }
                let j = seq.next[i as usize];
                if j == NIL || seq.ids[j as usize] != pair.1 {
                    continue;
                }
                let prev = seq.prev[i as usize];
                let after = seq.next[j as usize];
                let dec = |p: Merge, counts: &mut HashMap<Merge, i64>| {
                    if let Some(c) = counts.get_mut(&p) {
                        *c -= 1;
                    }
                };
                if prev != NIL {
                    let p = (seq.ids[prev as usize], pair.0);
                    dec(p, &mut counts);
                    touched.insert(p, ());
                }
                if after != NIL {
                    let p = (pair.1, seq.ids[after as usize]);
                    dec(p, &mut counts);
                    touched.insert(p, ());
                }
                dec(pair, &mut counts);
                seq.merge_at(i, new_id);
                if prev != NIL {
                    let p = (seq.ids[prev as usize], new_id);
                    *counts.entry(p).or_default() += 1;
                    positions.entry(p).or_default().push(prev);
                    touched.insert(p, ());
                }
                if after != NIL {
                    let p = (new_id, seq.ids[after as usize]);
                    *counts.entry(p).or_default() += 1;
                    positions.entry(p).or_default().push(i);
                    touched.insert(p, ());
                }
            }
            counts.remove(&pair);
            for (p, ()) in touched {
                if let Some(&c) = counts.get(&p) {
                    if c > 0 {
                        heap.push((c, Reverse(p)));
                    }
                }
            }
        }
        Self::from_merges(merges)
    }

    /// Encode bytes by applying merges in training order.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        if self.merges.is_empty() || text.len() < 2 {
            return text.iter().map(|&b| b as u32).collect();
        }
        let mut seq = Sequence::new(text.iter().map(|&b| b as u32).collect());
        // (rank, position) min-heap; leftmost occurrence wins within a rank.
        let mut heap: BinaryHeap<Reverse<(u32, u32)>> = BinaryHeap::new();
        for i in 0..text.len() - 1 {
            if let Some(&r) = self.ranks.get(&(seq.ids[i], seq.ids[i + 1])) {
                heap.push(Reverse((r, i as u32)));
            }
        }
        while let Some(Reverse((rank, i))) = heap.pop() {
            if !seq.alive(i) {
                continue;
            }
            let j = seq.next[i as usize];
            if j == NIL {
                continue;
            }
            let (a, b) = self.merges[rank as usize];
            if seq.ids[i as usize] != a || seq.ids[j as usize] != b {
                continue;
            }
            let new_id = 256 + rank;
            seq.merge_at(i, new_id);
            let prev = seq.prev[i as usize];
            if prev != NIL {
                if let Some(&r) = self.ranks.get(&(seq.ids[prev as usize], new_id)) {
                    heap.push(Reverse((r, prev)));
                }
            }
            let after = seq.next[i as usize];
            if after != NIL {
                if let Some(&r) = self.ranks.get(&(new_id, seq.ids[after as usize])) {
                    heap.push(Reverse((r, i)));
                }
            }
        }
        seq.collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match self.vocab.get(id as usize) {
                Some(b) => out.extend_from_slice(b),
                None => bail!(Index, "token id {} >= vocab size {}", id, self.vocab.len()),
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for v in &self.vocab {
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v);
        }
        out.extend_from_slice(&(self.merges.len() as u32).to_le_bytes());
        for &(a, b) in &self.merges {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "not a tokenizer file (bad magic)");
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            bail!(Format, "unsupported tokenizer version {}", version);
        }
        let vocab_size = read_u32(&mut r)? as usize;
        let mut vocab = Vec::with_capacity(vocab_size.min(1 << 20));
        for _ in 0..vocab_size {
            let len = read_u32(&mut r)? as usize;
            if len > bytes.len() {
                bail!(Format, "vocab entry length {} exceeds file", len);
            }
            let mut v = vec![0u8; len];
            read_exact(&mut r, &mut v)?;
            vocab.push(v);
        }
        let n_merges = read_u32(&mut r)? as usize;
        let mut merges = Vec::with_capacity(n_merges.min(1 << 20));
        for _ in 0..n_merges {
            merges.push((read_u32(&mut r)?, read_u32(&mut r)?));
        }
        if r.position() as usize != bytes.len() {
            bail!(Format, "trailing bytes after tokenizer");
        }
        let tok = Self::from_merges(merges)?;
        if tok.vocab != vocab {
            bail!(Format, "vocab entries inconsistent with merge list");
        }
        Ok(tok)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| L3Error::Format("unexpected end of file".into()))
}

pub(crate) fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Doubly linked token list used by training and encoding.
struct Sequence {
    ids: Vec<u32>,
    prev: Vec<u32>,
    next: Vec<u32>,
}

impl Sequence {
    fn new(ids: Vec<u32>) -> Self {
        let n = ids.len() as u32;
        let prev = (0..n).map(|i| if i == 0 { NIL } else { i - 1 }).collect();
        let next = (0..n).map(|i| if i + 1 == n { NIL } else { i + 1 }).collect();
        Sequence { ids, prev, next }
    }

    fn alive(&self, i: u32) -> bool {
        self.ids[i as usize] != NIL
    }

    /// Merge node `i` with its successor into `new_id`.
    fn merge_at(&mut self, i: u32, new_id: u32) {
        let j = self.next[i as usize];
        let after = self.next[j as usize];
        self.ids[i as usize] = new_id;
        self.ids[j as usize] = NIL;
        self.next[i as usize] = after;
        if after != NIL {
            self.prev[after as usize] = i;
        }
    }

    fn collect(&self) -> Vec<u32> {
        self.ids.iter().copied().filter(|&x| x != NIL).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn aaaa_first_merge() {
        let t = Tokenizer::train(b"aaaa", 258).unwrap();
        assert_eq!(t.merges()[0], (b'a' as u32, b'a' as u32));
    }

    #[test]
    fn target_256_is_byte_identity() {
        let t = Tokenizer::train(b"hello hello", 256).unwrap();
        assert!(t.merges().is_empty());
        assert_eq!(t.encode(b"ab"), vec![97, 98]);
    }

    #[test]
    fn abab_merges() {
        let corpus = b"ab".repeat(100);
        let t = Tokenizer::train(&corpus, 259).unwrap();
        assert_eq!(t.vocab_size(), 259);
        assert_eq!(&t.merges()[..2], &[(97, 98), (256, 256)]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Tokenizer::train(b"", 300).is_err());
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let t = Tokenizer::train(b"abcdef", 1000).unwrap();
        assert_eq!(t.vocab_size(), 256);
    }

    #[test]
    fn decode_basics() {
        let t = Tokenizer::bytes();
        assert_eq!(t.decode(&[]).unwrap(), b"");
        assert_eq!(t.decode(&[104, 105]).unwrap(), b"hi");
        assert!(t.decode(&[256]).is_err());
        assert!(t.encode(b"").is_empty());
    }

    #[test]
    fn encode_matches_sequential_merge_application() {
        let corpus = b"the cat sat on the mat; the cat ate the rat. that hat!".repeat(20);
        let t = Tokenizer::train(&corpus, 300).unwrap();
        let text = b"the rat that sat on that cat's hat";
        // oracle: apply each merge left to right in training order
        let mut ids: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        for (r, &(a, b)) in t.merges().iter().enumerate() {
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    out.push(256 + r as u32);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        assert_eq!(t.encode(text), ids);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let t = Tokenizer::train(&b"abracadabra ".repeat(50), 270).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(Tokenizer::from_bytes(&bytes).unwrap(), t);
        assert!(Tokenizer::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Tokenizer::from_bytes(&bad), Err(L3Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_random_bytes(data in proptest::collection::vec(any::<u8>(), 0..400)) {
            let t = Tokenizer::train(&b"some training text with repeats repeats repeats".repeat(5), 290).unwrap();
            let ids = t.encode(&data);
            prop_assert_eq!(t.decode(&ids).unwrap(), data.clone());
            prop_assert_eq!(t.encode(&data), ids);
        }
    }
}
