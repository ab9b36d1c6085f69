mod common;

use common::*;
use l3_core::allocation::{allocate, count_codewords, AllocationTable, CountingAlgo, UNCAPPED};
use l3_core::corpus::zipf_lines;
use l3_core::L3Error;
use proptest::prelude::*;

#[test]
fn hand_traced_corpora() {
    for (i, t) in traced().iter().enumerate() {
        let c = count(&t.lines, t.vocab);
        assert_eq!(entries(&c), t.counter, "corpus {i}");
        let a = allocate(&c, t.v, t.k).unwrap();
        assert_eq!(a.counts(), t.alloc.as_slice(), "corpus {i}");
    }
}

#[test]
fn oracle_agrees_on_zipfian_streams() {
    // Three seeds, about a million tokens in total.
    for (seed, vocab) in [(11u64, 300usize), (12, 1000), (13, 4000)] {
        let lines = zipf_lines(vocab, 8192, 43, 1.1, seed);
        let lib = count(&lines, vocab);
        let ora = oracle_count(&lines, vocab);
        assert_eq!(entries(&lib), ora, "seed {seed}");
        for (mult, k) in [(2usize, 4u32), (8, 64), (16, UNCAPPED)] {
            let v = mult * vocab;
            let want = oracle_alloc(&ora, vocab, v, k);
            match allocate(&lib, v, k) {
                Ok(a) => assert_eq!(Some(a.counts().to_vec()), want, "seed {seed} v {v} k {k}"),
                Err(L3Error::AllocationInfeasible(_)) => assert_eq!(want, None),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn pseudocode_rule_also_yields_valid_tables() {
    let lines = zipf_lines(200, 500, 30, 1.2, 5);
    let c = count_codewords(&lines, 200, CountingAlgo::Pseudocode).unwrap();
    let a = allocate(&c, 1600, 64).unwrap();
    assert_eq!(a.total(), 1600);
    assert!(a.counts().iter().all(|&d| (1..=64).contains(&d)));
}

#[test]
fn uncapped_concentrates_more_than_capped() {
    let lines = zipf_lines(2048, 4000, 64, 1.1, 21);
    let c = count(&lines, 2048);
    let v = 8 * 2048;
    let capped = allocate(&c, v, 64).unwrap();
    let free = allocate(&c, v, UNCAPPED).unwrap();
    assert_eq!(capped.max_count(), 64);
    assert!(free.max_count() > capped.max_count(), "{} vs {}", free.max_count(), capped.max_count());
}

#[test]
fn errors() {
    let c = count(&[vec![0, 1, 0, 1]], 2);
    assert!(matches!(allocate(&c, 1, 2), Err(L3Error::Config(_))));
    assert!(matches!(allocate(&c, 3, 1), Err(L3Error::AllocationInfeasible(_))));
    assert!(matches!(allocate(&c, 50, 64), Err(L3Error::AllocationInfeasible(_))));
    assert!(matches!(count_codewords(&[vec![0, 2]], 2, CountingAlgo::Appendix), Err(L3Error::Index(_))));
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = AllocationTable::from_counts(vec![3, 1, 7, 2], 8).unwrap();
    let p = dir.path().join("a.alloc");
    a.save(&p).unwrap();
    assert_eq!(AllocationTable::load(&p).unwrap(), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn allocation_invariants((vocab, lines) in counter_strategy(), extra in 0usize..64, k in 1u32..12) {
        check_allocation(vocab, &lines, extra, k)?;
    }
}
