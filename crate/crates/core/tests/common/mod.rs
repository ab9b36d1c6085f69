#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use l3_core::allocation::{count_codewords, uniform_allocate, AllocationTable, CodewordCounter, CountingAlgo};
use l3_core::layer::{l3_forward_graph, l3_forward_naive, l3_forward_sorted, make_sort_plan, ExecPath, L3Dims, L3Params, L3Vars};
use l3_core::L3Error;
use l3_core::allocation::allocate;
use l3_core::numeric::{finite_diff_check, GradCheckOptions, Graph, Scalar, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn count(lines: &[Vec<u32>], vocab: usize) -> CodewordCounter {
    count_codewords(lines, vocab, CountingAlgo::Appendix).unwrap()
}

pub fn entries(c: &CodewordCounter) -> Vec<(Vec<u32>, u64)> {
    c.iter().map(|(k, v)| (k.to_vec(), v)).collect()
}

pub fn e(k: &[u32], v: u64) -> (Vec<u32>, u64) {
    (k.to_vec(), v)
}

pub struct Traced {
    pub vocab: usize,
    pub lines: Vec<Vec<u32>>,
    pub counter: Vec<(Vec<u32>, u64)>,
    pub v: usize,
    pub k: u32,
    pub alloc: Vec<u32>,
}

pub fn traced() -> Vec<Traced> {
    vec![
        Traced {
            vocab: 2,
            lines: vec![vec![0, 1, 0, 1, 0, 1]],
            counter: vec![e(&[0], 1), e(&[1], 0), e(&[0, 1], 2), e(&[0, 1, 0], 1)],
            v: 4,
            k: 2,
            alloc: vec![2, 2],
        },
        Traced {
            vocab: 3,
            lines: vec![vec![0; 7]],
            counter: vec![e(&[0], 2), e(&[1], 0), e(&[2], 0), e(&[0, 0], 1), e(&[0, 0, 0], 1)],
            v: 5,
            k: 3,
            alloc: vec![3, 1, 1],
        },
        Traced {
            vocab: 3,
            lines: vec![vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 2, 0]],
            counter: vec![e(&[0], 1), e(&[1], 0), e(&[2], 0), e(&[0, 1], 2), e(&[0, 1, 2], 2), e(&[0, 1, 2, 0], 1)],
            v: 6,
            k: 2,
            alloc: vec![2, 2, 2],
        },
        Traced {
            vocab: 4,
            lines: vec![vec![3, 2, 1, 0, 3, 2, 1, 0, 3, 2]],
            counter: vec![
                e(&[0], 1),
                e(&[1], 1),
                e(&[2], 0),
                e(&[3], 1),
                e(&[3, 2], 2),
                e(&[1, 0], 1),
                e(&[3, 2, 1], 1),
                e(&[0, 3], 1),
            ],
            v: 7,
            k: 3,
            alloc: vec![2, 2, 2, 1],
        },
        Traced {
            vocab: 2,
            lines: vec![vec![1, 1, 0, 1, 1, 0, 1, 1, 1]],
            counter: vec![e(&[0], 1), e(&[1], 2), e(&[1, 1], 2), e(&[0, 1], 1), e(&[1, 0], 1), e(&[1, 1, 1], 1)],
            v: 5,
            k: 4,
            alloc: vec![2, 3],
        },
        Traced {
            vocab: 3,
            lines: vec![vec![2], vec![]],
            counter: vec![e(&[0], 0), e(&[1], 0), e(&[2], 0)],
            v: 3,
            k: 1,
            alloc: vec![1, 1, 1],
        },
    ]
}

/// Line-by-line transcription of the reference listing, kept independent of the library.
pub fn oracle_count(lines: &[Vec<u32>], vocab: usize) -> Vec<(Vec<u32>, u64)> {
    let mut keys: Vec<Vec<u32>> = Vec::new();
    let mut vals: Vec<u64> = Vec::new();
    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    for s in 0..vocab as u32 {
        index.insert(vec![s], keys.len());
        keys.push(vec![s]);
        vals.push(0);
    }
    for toks in lines {
        let mut last = 0usize;
        let mut cur = 1usize;
        while cur < toks.len() {
            while cur < toks.len() && index.contains_key(&toks[last..cur]) {
                cur += 1;
            }
            if cur > last + 1 {
                let i = index[&toks[last..cur - 1]];
                vals[i] += 1;
                let w = toks[last..cur].to_vec();
                match index.get(&w) {
                    Some(&j) => vals[j] = 1,
                    None => {
                        index.insert(w.clone(), keys.len());
                        keys.push(w);
                        vals.push(1);
                    }
                }
            }
            last = cur;
            cur += 1;
        }
    }
    keys.into_iter().zip(vals).collect()
}

pub fn oracle_alloc(counter: &[(Vec<u32>, u64)], vocab: usize, target: usize, k: u32) -> Option<Vec<u32>> {
    let mut sorted: Vec<&(Vec<u32>, u64)> = counter.iter().collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1));
    let mut alloc = vec![1u32; vocab];
    let mut n = vocab;
    let mut i = 0;
    while n < target {
        let (cw, _) = sorted.get(i)?;
        let t = *cw.last().unwrap() as usize;
        if alloc[t] < k {
            alloc[t] += 1;
            n += 1;
        }
        i += 1;
    }
    Some(alloc)
}

/// Codewords ending in each token, and each token's first and last position in
/// descending-count order.
pub fn ranks(c: &CodewordCounter) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let v = c.vocab_size();
    let mut n = vec![0; v];
    let mut first = vec![usize::MAX; v];
    let mut last = vec![0; v];
    for (i, (cw, _)) in c.sorted_desc().iter().enumerate() {
        let t = *cw.last().unwrap() as usize;
        n[t] += 1;
        first[t] = first[t].min(i);
        last[t] = i;
    }
    (n, first, last)
}

pub fn counter_strategy() -> impl Strategy<Value = (usize, Vec<Vec<u32>>)> {
    (1usize..24).prop_flat_map(|vocab| {
        let line = prop::collection::vec(0..vocab as u32, 0..24);
        (Just(vocab), prop::collection::vec(line, 0..8))
    })
}

pub fn random_alloc(rng: &mut ChaCha8Rng, vocab: usize, max_dt: u32) -> Arc<AllocationTable> {
    let counts: Vec<u32> = (0..vocab).map(|_| rng.gen_range(1..=max_dt)).collect();
    Arc::new(AllocationTable::from_counts(counts, max_dt).unwrap())
}

/// Perturb every parameter off its initial values so gains and scores are non-trivial.
pub fn jitter<T: Scalar>(p: &mut L3Params<T>, rng: &mut ChaCha8Rng) {
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = *v + T::from(rng.gen_range(-0.5..0.5)).unwrap();
        }
    }
}

pub fn gradcheck_trial(seed: u64, tied: bool, path: ExecPath) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.gen_range(4..=16);
    let d_emb = if tied { d_in } else { rng.gen_range(2..=8) };
    let d_up = rng.gen_range(2..=8);
    let dims = L3Dims { d_in, d_emb, d_up, d_out: rng.gen_range(2..=6) };
    let vocab = rng.gen_range(1..=4);
    let alloc = random_alloc(&mut rng, vocab, 8);
    let mut p = L3Params::<f64>::init(dims, alloc.clone(), tied, &mut rng).unwrap();
    jitter(&mut p, &mut rng);
    let n = rng.gen_range(1..=5);
    let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect();
    let x = Tensor::<f64>::uniform(&[n, d_in], 1.0, &mut rng);
    let w = Tensor::<f64>::uniform(&[n, dims.d_out], 1.0, &mut rng);
    let mut params = vec![x];
    params.extend(p.tensors().into_iter().cloned());
    let report = finite_diff_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let (wk, rest) = (v[1], &v[2..]);
            let (wv, rest) = if tied { (wk, rest) } else { (rest[0], &rest[1..]) };
            let vars = L3Vars { wk, wv, w_up: rest[0], w_mix: rest[1], norm_in: rest[2], norm_out: rest[3] };
            let out = l3_forward_graph(g, v[0], &tokens, &vars, &alloc, path, None)?;
            let wc = g.constant(w.clone());
            let prod = g.mul(out, wc)?;
            Ok(g.sum_all(prod))
        },
        &params,
        GradCheckOptions { seed, ..Default::default() },
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

#[derive(Debug, Clone, Copy)]
pub enum Batch {
    Random,
    SameToken,
    Distinct,
    SingleEmbedding,
}

pub fn equivalence_trial<T: Scalar>(seed: u64, kind: Batch) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.gen_range(2..=24);
    let tied = rng.gen_bool(0.3);
    let dims = L3Dims {
        d_in,
        d_emb: if tied { d_in } else { rng.gen_range(1..=16) },
        d_up: rng.gen_range(1..=32),
        d_out: rng.gen_range(1..=24),
    };
    let vocab = rng.gen_range(1..=12);
    let alloc = match kind {
        Batch::SingleEmbedding => Arc::new(uniform_allocate(vocab, 1).unwrap()),
        _ => random_alloc(&mut rng, vocab, 16),
    };
    let mut p = L3Params::<T>::init(dims, alloc, tied, &mut rng).unwrap();
    jitter(&mut p, &mut rng);
    let n = match kind {
        Batch::Distinct => vocab,
        _ => rng.gen_range(1..=40),
    };
    let tokens: Vec<u32> = match kind {
        Batch::SameToken => vec![rng.gen_range(0..vocab as u32); n],
        Batch::Distinct => {
            let mut t: Vec<u32> = (0..vocab as u32).collect();
            t.reverse();
            t
        }
        _ => (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect(),
    };
    let x = Tensor::<T>::uniform(&[n, d_in], 2.0, &mut rng);
    let plan = make_sort_plan(&tokens, &p.alloc).unwrap();
    let sorted = l3_forward_sorted(&x, &tokens, &p, Some(&plan)).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &t) in tokens.iter().enumerate() {
        let row = l3_forward_naive(&x.data()[i * d_in..(i + 1) * d_in], t, &p).unwrap();
        for (a, b) in row.iter().zip(&sorted.data()[i * dims.d_out..(i + 1) * dims.d_out]) {
            let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    worst
}

pub fn kinds(i: u64) -> Batch {
    [Batch::Random, Batch::SameToken, Batch::Distinct, Batch::SingleEmbedding][(i % 4) as usize]
}


/// Every structural property an allocation of `vocab + extra` embeddings under cap `k` must have.
pub fn check_allocation(vocab: usize, lines: &[Vec<u32>], extra: usize, k: u32) -> Result<(), TestCaseError> {
    let c = count(lines, vocab);
    let v = vocab + extra;
    let (n, first, last) = ranks(&c);
    let reachable: usize = n.iter().map(|&m| (k as usize).min(1 + m)).sum();
    match allocate(&c, v, k) {
        Err(L3Error::AllocationInfeasible(_)) => prop_assert!(reachable < v),
        Err(e) => return Err(TestCaseError::fail(e.to_string())),
        Ok(a) => {
            let d = a.counts();
            prop_assert!(d.iter().all(|&x| x >= 1 && x <= k));
            prop_assert_eq!(d.iter().map(|&x| x as usize).sum::<usize>(), v);
            prop_assert!(a.bounds().windows(2).all(|w| w[0] < w[1]));
            for x in 0..vocab {
                prop_assert!(d[x] as usize <= 1 + n[x]);
                for y in 0..vocab {
                    if x == y || n[x] == 0 || n[y] == 0 || last[x] >= first[y] {
                        continue;
                    }
                    // every codeword ending in x outranks every codeword ending in y
                    if d[y] > 1 {
                        prop_assert_eq!(d[x] as usize, (k as usize).min(1 + n[x]));
                    }
                    if n[x] >= n[y] {
                        prop_assert!(d[x] >= d[y]);
                    }
                }
            }
        }
    }
    Ok(())
}
