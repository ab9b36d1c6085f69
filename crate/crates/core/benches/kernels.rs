use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use l3_core::allocation::{allocate, count_codewords, CountingAlgo};
use l3_core::corpus::zipf_lines;
use l3_core::layer::{l3_forward_sorted, make_sort_plan, L3Dims, L3Params};
use l3_core::model::{build_model, eval_perplexity, ModelConfig, Precision};
use l3_core::numeric::{kernels, Tensor};
use l3_core::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (m, k, n) = (512, 256, 1024);
    let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = c.benchmark_group("matmul_nt_512x256x1024");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bch| bch.iter(|| kernels::matmul_nt(&a, &b, m, k, n)));
    }
    par::set_parallel(true);
    g.finish();
}

fn l3_layer(c: &mut Criterion) {
    let vocab = 2048;
    let lines = zipf_lines(vocab, 2000, 64, 1.1, 1);
    let counter = count_codewords(&lines, vocab, CountingAlgo::Appendix).unwrap();
    let alloc = Arc::new(allocate(&counter, 8 * vocab, 64).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = L3Dims { d_in: 256, d_emb: 256, d_up: 1024, d_out: 256 };
    let p = L3Params::<f32>::init(dims, alloc.clone(), false, &mut rng).unwrap();
    let mut g = c.benchmark_group("l3_forward_sorted");
    g.sample_size(20);
    for rows in [256usize, 2048] {
        let tokens: Vec<u32> = lines.iter().flatten().take(rows).copied().collect();
        let x = Tensor::<f32>::uniform(&[rows, 256], 1.0, &mut rng);
        let plan = make_sort_plan(&tokens, &alloc).unwrap();
        for (name, on) in MODES {
            par::set_parallel(on);
            g.bench_with_input(BenchmarkId::new(name, rows), &rows, |bch, _| {
                bch.iter(|| l3_forward_sorted(&x, &tokens, &p, Some(&plan)).unwrap())
            });
        }
    }
    par::set_parallel(true);
    g.finish();
}

fn eval(c: &mut Criterion) {
    let cfg = ModelConfig {
        vocab_size: 512,
        n_layers: 2,
        d_model: 128,
        n_heads: 2,
        head_dim: 64,
        d_ff: 512,
        context_length: 128,
        precision: Precision::F32,
        ..Default::default()
    };
    let model = build_model::<f32>(&cfg, None).unwrap();
    let stream: Vec<u32> = (0..4097u32).map(|i| (i * 7919) % 512).collect();
    let mut g = c.benchmark_group("eval_perplexity_4k_tokens");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |bch| bch.iter(|| eval_perplexity(&model, &stream, 128, None).unwrap()));
    }
    par::set_parallel(true);
    g.finish();
}

criterion_group!(benches, gemm, l3_layer, eval);
criterion_main!(benches);
