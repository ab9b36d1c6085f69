use std::sync::Arc;

use l3_core::numeric::{finite_diff_check, AttnBlock, GradCheckOptions, Graph, Tensor, Var};
use l3_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

/// Reduce an output to a scalar with fixed random weights so every element matters.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand_t(&shape, seed ^ 0xabc));
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn check<F>(f: F, params: &[Tensor<f64>])
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = finite_diff_check(f, params, GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::identity(2));
    let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let d = g.matmul(a, b).unwrap();
    assert_eq!(g.value(d).data(), &[11.0]);
    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(g.matmul(a, bad).is_err());
}

#[test]
fn identity_matmul_is_exact() {
    let a = rand_t(&[6, 5], 1);
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::identity(6));
    let av = g.constant(a.clone());
    let c = g.matmul(i, av).unwrap();
    assert_eq!(g.value(c), &a);
}

#[test]
fn matmul_gradient_of_sum() {
    check(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum_all(c))
        },
        &[rand_t(&[5, 7], 2), rand_t(&[7, 3], 3)],
    );
    check(
        |g, v| {
            let c = g.matmul_nt(v[0], v[1])?;
            weighted_sum(g, c, 1)
        },
        &[rand_t(&[4, 6], 4), rand_t(&[3, 6], 5)],
    );
}

#[test]
fn elementwise_gradients() {
    check(
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let s = g.scale(m, 0.7);
            let y = g.silu(s);
            weighted_sum(g, y, 2)
        },
        &[rand_t(&[3, 4], 6), rand_t(&[3, 4], 7)],
    );
}

#[test]
fn rms_norm_gradient_and_values() {
    check(
        |g, v| {
            let y = g.rms_norm(v[0], v[1], 1e-5)?;
            weighted_sum(g, y, 3)
        },
        &[rand_t(&[4, 6], 8), rand_t(&[6], 9)],
    );
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let gain = g.constant(rand_t(&[3], 10));
    let y = g.rms_norm(z, gain, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let ones = g.constant(Tensor::ones(&[1, 4]));
    let gain1 = g.constant(Tensor::ones(&[4]));
    let y = g.rms_norm(ones, gain1, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0; 4]);
    let x = g.constant(rand_t(&[1, 64], 11));
    let gain64 = g.constant(Tensor::ones(&[64]));
    let y = g.rms_norm(x, gain64, 1e-5).unwrap();
    let rms = (g.value(y).data().iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
    assert!((rms - 1.0).abs() < 1e-3);
}

#[test]
fn softmax_examples_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0]]).unwrap());
    let p = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5, 0.5, 0.5]);
    let one = g.constant(Tensor::from_rows(&[&[-123.4]]).unwrap());
    let p1 = g.softmax_rows(one).unwrap();
    assert_eq!(g.value(p1).data(), &[1.0]);
    let nan = g.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]]).unwrap());
    assert!(g.softmax_rows(nan).is_err());
    check(
        |g, v| {
            let p = g.softmax_rows(v[0])?;
            weighted_sum(g, p, 4)
        },
        &[rand_t(&[3, 5], 12)],
    );
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::zeros(&[2, 4]));
    let l = g.cross_entropy(u, &[0, 3]).unwrap();
    assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-15);
    let mut dom = Tensor::<f64>::zeros(&[1, 4]);
    dom.data_mut()[2] = 1e4;
    let d = g.constant(dom);
    let l = g.cross_entropy(d, &[2]).unwrap();
    assert!(g.scalar(l).abs() < 1e-12);
    assert!(g.cross_entropy(u, &[0, 4]).is_err());

    // brute-force log-sum-exp oracle on a random 3x5 case
    let logits = rand_t(&[3, 5], 13);
    let targets = [4usize, 0, 2];
    let mut want = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want += -(row[t].exp() / z).ln();
    }
    want /= 3.0;
    let lv = g.constant(logits.clone());
    let l = g.cross_entropy(lv, &targets).unwrap();
    assert!((g.scalar(l) - want).abs() < 1e-14);
    check(move |g, v| g.cross_entropy(v[0], &targets), &[logits]);
}

#[test]
fn soft_target_kl_gradient() {
    let tgt_logits = rand_t(&[3, 6], 14);
    let mut target = Vec::new();
    for r in 0..3 {
        let z: f64 = tgt_logits.row(r).iter().map(|v| v.exp()).sum();
        target.extend(tgt_logits.row(r).iter().map(|v| v.exp() / z));
    }
    let mut g = Graph::<f64>::new();
    let same = g.constant(tgt_logits.clone());
    let kl = g.soft_target_kl(same, &target).unwrap();
    assert!(g.scalar(kl).abs() < 1e-14);
    check(move |g, v| g.soft_target_kl(v[0], &target), &[rand_t(&[3, 6], 15)]);
}

#[test]
fn rope_and_attention_gradients() {
    check(
        |g, v| {
            let r = g.rope(v[0], 4, 3, 10000.0)?;
            weighted_sum(g, r, 5)
        },
        &[rand_t(&[6, 8], 16)],
    );
    check(
        |g, v| {
            let o = g.causal_attention(v[0], v[1], v[2], 2, 4)?;
            weighted_sum(g, o, 6)
        },
        &[rand_t(&[8, 6], 17), rand_t(&[8, 6], 18), rand_t(&[8, 6], 19)],
    );
}

#[test]
fn structural_op_gradients() {
    check(
        |g, v| {
            let a = g.gather_rows(v[0], &[2, 0, 2, 1])?;
            let b = g.slice_rows(v[1], 1..5)?;
            let c = g.concat_cols(a, b)?;
            let s = g.stack_rows(&[c, c])?;
            weighted_sum(g, s, 7)
        },
        &[rand_t(&[3, 2], 20), rand_t(&[6, 3], 21)],
    );
}

#[test]
fn block_attention_gradient() {
    let blocks = Arc::new(vec![
        AttnBlock { rows: vec![0, 3], emb: 0..3 },
        AttnBlock { rows: vec![1], emb: 4..5 },
        AttnBlock { rows: vec![2, 4], emb: 5..7 },
    ]);
    check(
        move |g, v| {
            let o = g.block_attention(v[0], v[1], v[2], blocks.clone())?;
            weighted_sum(g, o, 8)
        },
        &[rand_t(&[5, 4], 22), rand_t(&[7, 4], 23), rand_t(&[7, 3], 24)],
    );
}

#[test]
fn gradients_accumulate_through_shared_inputs() {
    // d/dx sum(x*x + x) = 2x + 1
    let x = rand_t(&[4], 25);
    let mut g = Graph::<f64>::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.add(sq, v).unwrap();
    let out = g.sum_all(s);
    g.backward(out).unwrap();
    for (gr, xv) in g.grad(v).unwrap().iter().zip(x.data()) {
        assert!((gr - (2.0 * xv + 1.0)).abs() < 1e-14);
    }
}
