//! Corpus loading, tokenization into line streams, the train/validation split,
//! and deterministic synthetic text for desk-scale experiments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::par;
use crate::tokenizer::Tokenizer;

/// Token inserted between documents when packing the training stream (the NUL byte).
pub const DOC_SEPARATOR: u32 = 0;

/// Text files of a corpus directory, sorted by path.
pub fn list_text_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        bail!(Config, "corpus directory {} does not exist", dir.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Config, "no .txt files in {}", dir.display());
    }
    Ok(files)
}

/// Raw bytes of every document (file) in order.
pub fn read_documents(dir: impl AsRef<Path>) -> Result<Vec<Vec<u8>>> {
    list_text_files(dir)?
        .iter()
        .map(|p| fs::read(p).map_err(Into::into))
        .collect()
}

/// A tokenized corpus: per-document lists of per-line token sequences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedCorpus {
    pub docs: Vec<Vec<Vec<u32>>>,
}

impl TokenizedCorpus {
    /// Encode each line (newline included) independently.
    pub fn encode(tok: &Tokenizer, docs: &[Vec<u8>]) -> Self {
        let docs = par::map_range(docs.len(), |i| {
            docs[i]
                .split_inclusive(|&b| b == b'\n')
                .map(|line| tok.encode(line))
                .collect()
        });
        TokenizedCorpus { docs }
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().flatten().map(|l| l.len()).sum()
    }

    pub fn lines(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.docs.iter().flatten()
    }

    /// Split at line granularity so the last `val_fraction` of tokens (in file order)
    /// is held out.
    pub fn split(&self, val_fraction: f64) -> (TokenizedCorpus, TokenizedCorpus) {
        let total = self.num_tokens();
        let train_target = total - (total as f64 * val_fraction).round() as usize;
        let mut train = TokenizedCorpus::default();
        let mut val = TokenizedCorpus::default();
        let mut seen = 0;
        for doc in &self.docs {
            let mut tr = Vec::new();
            let mut va = Vec::new();
            for line in doc {
                if seen < train_target {
                    tr.push(line.clone());
                } else {
                    va.push(line.clone());
                }
                seen += line.len();
            }
            if !tr.is_empty() {
                train.docs.push(tr);
            }
            if !va.is_empty() {
                val.docs.push(va);
            }
        }
        (train, val)
    }

    /// Documents joined by [`DOC_SEPARATOR`].
    pub fn stream(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.num_tokens() + self.docs.len());
        for (i, doc) in self.docs.iter().enumerate() {
            if i > 0 {
                out.push(DOC_SEPARATOR);
            }
            for line in doc {
                out.extend_from_slice(line);
            }
        }
        out
    }
}

/// I.i.d. Zipf-distributed token lines (ids `0..vocab`), for allocation tests.
pub fn zipf_lines(vocab: usize, n_lines: usize, line_len: usize, exponent: f64, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Zipf::new(vocab as u64, exponent).expect("valid zipf parameters");
    (0..n_lines)
        .map(|_| (0..line_len).map(|_| z.sample(&mut rng) as u32 - 1).collect())
        .collect()
}

/// Parameters of the synthetic text generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_words: usize,
    pub successors: usize,
    pub files: usize,
    pub bytes_per_file: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_words: 4000,
            successors: 12,
            files: 8,
            bytes_per_file: 1 << 20,
            seed: 1234,
        }
    }
}

const ONSETS: &[&str] = &["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "ch", "st", "th", "tr", "sh", "pl", "gr"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io", "y"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "m", "x"];

/// Deterministic pseudo-English: a Zipfian lexicon of syllable words, where each
/// word has its own successor distribution and word pairs add a second-order bias.
pub struct SynthText {
    words: Vec<String>,
    unigram: WeightedIndex<f64>,
    successors: Vec<(Vec<usize>, WeightedIndex<f64>)>,
    rng: ChaCha8Rng,
}

impl SynthText {
    pub fn new(cfg: SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut words = Vec::with_capacity(cfg.n_words);
        let mut seen = std::collections::HashSet::new();
        while words.len() < cfg.n_words {
            let syl = 1 + (rng.gen::<f64>().powi(2) * 3.0) as usize;
            let mut w = String::new();
            for _ in 0..syl {
                w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
                w.push_str(NUCLEI[rng.gen_range(0..NUCLEI.len())]);
                w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        // frequent words tend to be short
        words.sort_by_key(|w| w.len());
        let zipf: Vec<f64> = (1..=cfg.n_words).map(|r| 1.0 / r as f64).collect();
        let unigram = WeightedIndex::new(&zipf).unwrap();
        let successors = (0..cfg.n_words)
            .map(|_| {
                let ids: Vec<usize> = (0..cfg.successors).map(|_| unigram.sample(&mut rng)).collect();
                let w: Vec<f64> = (1..=cfg.successors).map(|r| 1.0 / (r as f64).powf(1.2)).collect();
                (ids, WeightedIndex::new(&w).unwrap())
            })
            .collect();
        SynthText {
            words,
            unigram,
            successors,
            rng,
        }
    }

    fn next_word(&mut self, prev: usize, cur: usize) -> usize {
        let u: f64 = self.rng.gen();
        if u < 0.55 {
            let (ids, w) = &self.successors[cur];
            ids[w.sample(&mut self.rng)]
        } else if u < 0.8 {
            // pair-specific choice: a fixed successor of a hashed (prev, cur) context
            let h = (prev.wrapping_mul(0x9E37_79B9) ^ cur.wrapping_mul(0x85EB_CA6B)) % self.words.len();
            let (ids, w) = &self.successors[h];
            ids[w.sample(&mut self.rng)]
        } else {
            self.unigram.sample(&mut self.rng)
        }
    }

    /// Generate roughly `bytes` of text made of sentences and paragraphs.
    pub fn document(&mut self, bytes: usize) -> String {
        let mut out = String::with_capacity(bytes + 256);
        let (mut prev, mut cur) = (0, self.unigram.sample(&mut self.rng));
        while out.len() < bytes {
            let len = self.rng.gen_range(6..20);
            let mut first = true;
            for _ in 0..len {
                let w = &self.words[cur];
                if first {
                    let mut c = w.chars();
                    if let Some(f) = c.next() {
                        out.extend(f.to_uppercase());
                        out.push_str(c.as_str());
                    }
                    first = false;
                } else {
                    out.push(' ');
                    out.push_str(w);
                }
                let nxt = self.next_word(prev, cur);
                prev = cur;
                cur = nxt;
            }
            out.push_str(if self.rng.gen_bool(0.1) { "?" } else { "." });
            out.push(if self.rng.gen_bool(0.15) { '\n' } else { ' ' });
        }
        out.push('\n');
        out
    }
}

/// Write `cfg.files` synthetic documents into `dir` as `doc_XXXX.txt`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, cfg: SynthConfig) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut gen = SynthText::new(cfg);
    let mut paths = Vec::new();
    for i in 0..cfg.files {
        let p = dir.join(format!("doc_{i:04}.txt"));
        fs::write(&p, gen.document(cfg.bytes_per_file))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_order_and_fraction() {
        let c = TokenizedCorpus {
            docs: vec![vec![vec![1; 10], vec![2; 10]], vec![vec![3; 30], vec![4; 50]]],
        };
        let (tr, va) = c.split(0.5);
        assert_eq!(tr.num_tokens(), 50);
        assert_eq!(va.num_tokens(), 50);
        assert_eq!(va.docs, vec![vec![vec![4; 50]]]);
        let s = c.stream();
        assert_eq!(s.len(), 101);
        assert_eq!(s[20], DOC_SEPARATOR);
    }

    #[test]
    fn synthetic_text_is_deterministic() {
        let cfg = SynthConfig { n_words: 200, files: 1, bytes_per_file: 2000, ..Default::default() };
        let a = SynthText::new(cfg).document(2000);
        let b = SynthText::new(cfg).document(2000);
        assert_eq!(a, b);
        assert!(a.len() >= 2000);
        assert!(a.is_ascii());
    }

    #[test]
    fn zipf_lines_in_range() {
        let l = zipf_lines(50, 10, 20, 1.1, 7);
        assert!(l.iter().flatten().all(|&t| t < 50));
        let zeros = l.iter().flatten().filter(|&&t| t == 0).count();
        let last = l.iter().flatten().filter(|&&t| t == 49).count();
        assert!(zeros > last);
    }
}
