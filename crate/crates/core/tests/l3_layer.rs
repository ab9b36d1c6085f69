mod common;

use std::sync::Arc;

use common::*;
use l3_core::allocation::uniform_allocate;
use l3_core::layer::{l3_forward_naive, l3_forward_sorted, ExecPath, L3Dims, L3Params};
use l3_core::numeric::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_layer_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let tied = trial % 2 == 1;
        for path in [ExecPath::Sorted, ExecPath::Naive] {
            let e = gradcheck_trial(1000 + trial, tied, path);
            assert!(e < 1e-4, "trial {trial} tied {tied} {path:?}: relative error {e}");
            worst = worst.max(e);
        }
    }
    eprintln!("worst relative error {worst:.3e}");
}

#[test]
fn sorted_and_naive_paths_agree() {
    for i in 0..1000u64 {
        let e32 = equivalence_trial::<f32>(i, kinds(i));
        assert!(e32 < 1e-5, "f32 batch {i} {:?}: {e32}", kinds(i));
        let e64 = equivalence_trial::<f64>(i, kinds(i));
        assert!(e64 < 1e-10, "f64 batch {i} {:?}: {e64}", kinds(i));
    }
}

#[test]
fn tied_matches_an_untied_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let alloc = random_alloc(&mut rng, 5, 6);
    let mut p = L3Params::<f64>::init(L3Dims { d_in: 6, d_emb: 6, d_up: 5, d_out: 6 }, alloc, true, &mut rng).unwrap();
    jitter(&mut p, &mut rng);
    let u = p.untied();
    let tokens = [4u32, 0, 4, 2, 1, 3];
    let x = Tensor::<f64>::uniform(&[6, 6], 1.0, &mut rng);
    assert_eq!(l3_forward_sorted(&x, &tokens, &p, None).unwrap(), l3_forward_sorted(&x, &tokens, &u, None).unwrap());
    for (i, &t) in tokens.iter().enumerate() {
        let r = &x.data()[i * 6..(i + 1) * 6];
        assert_eq!(l3_forward_naive(r, t, &p).unwrap(), l3_forward_naive(r, t, &u).unwrap());
    }
}

#[test]
fn out_of_range_tokens_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = L3Params::<f64>::init(L3Dims { d_in: 4, d_emb: 4, d_up: 4, d_out: 4 }, Arc::new(uniform_allocate(3, 2).unwrap()), false, &mut rng).unwrap();
    let x = Tensor::<f64>::zeros(&[1, 4]);
    assert!(l3_forward_sorted(&x, &[3], &p, None).is_err());
    assert!(l3_forward_naive(&[0.0; 4], 3, &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Rows bound to tokens absent from the batch never influence the output.
    #[test]
    fn softmax_locality(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = 6;
        let alloc = random_alloc(&mut rng, vocab, 5);
        let mut p = L3Params::<f64>::init(L3Dims { d_in: 5, d_emb: 3, d_up: 4, d_out: 5 }, alloc.clone(), false, &mut rng).unwrap();
        let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3u32)).collect();
        let x = Tensor::<f64>::uniform(&[n, 5], 1.0, &mut rng);
        let before = l3_forward_sorted(&x, &tokens, &p, None).unwrap();
        let start = alloc.range(3).start;
        for v in &mut p.wk.data_mut()[start * 5..] {
            *v = rng.gen_range(-9.0..9.0);
        }
        for v in &mut p.wv.as_mut().unwrap().data_mut()[start * 3..] {
            *v = rng.gen_range(-9.0..9.0);
        }
        prop_assert_eq!(before, l3_forward_sorted(&x, &tokens, &p, None).unwrap());
    }

    /// Permuting the batch permutes the output rows.
    #[test]
    fn batch_permutation(seed in any::<u64>(), n in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alloc = random_alloc(&mut rng, 4, 6);
        let p = L3Params::<f64>::init(L3Dims { d_in: 4, d_emb: 4, d_up: 6, d_out: 3 }, alloc, rng.gen_bool(0.5), &mut rng).unwrap();
        let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4u32)).collect();
        let x = Tensor::<f64>::uniform(&[n, 4], 1.0, &mut rng);
        let out = l3_forward_sorted(&x, &tokens, &p, None).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left(n / 3);
        let px: Vec<f64> = perm.iter().flat_map(|&i| x.data()[i * 4..(i + 1) * 4].to_vec()).collect();
        let pt: Vec<u32> = perm.iter().map(|&i| tokens[i]).collect();
        let pout = l3_forward_sorted(&Tensor::new(vec![n, 4], px).unwrap(), &pt, &p, None).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                let (a, b) = (pout.data()[j * 3 + c], out.data()[i * 3 + c]);
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
