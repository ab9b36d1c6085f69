//! Slice-level kernels shared by the autodiff tape and the no-grad inference path.

use super::scalar::{s, Scalar};
use crate::par;

/// Rows per parallel work item in row-partitioned GEMMs.
const GEMM_ROW_BLOCK: usize = 32;
/// Up to this many rows, `a @ bᵀ` runs as dot products over the rows of `b`.
const DOT_PATH_ROWS: usize = 4;
/// Output columns per parallel work item on the dot-product path.
const DOT_COL_BLOCK: usize = 128;

/// Layout of a matrix operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    /// Stored as given, row-major.
    N,
    /// Stored transposed, row-major.
    T,
}

/// `c[m×n] = alpha * op(a) @ op(b) + beta * c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// Row blocks of `c` are computed in parallel.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    ta: Trans,
    tb: Trans,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::N => (k as isize, 1),
        Trans::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (n as isize, 1),
        Trans::T => (1, k as isize),
    };
    if ta == Trans::N && tb == Trans::T && m <= DOT_PATH_ROWS {
        gemm_nt_dots(m, k, n, alpha, a, b, beta, c);
        return;
    }
    // Small products are not worth the fan-out.
    if m <= GEMM_ROW_BLOCK || m * k * n < 1 << 16 {
        T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
        return;
    }
    par::for_each_chunk_mut(c, GEMM_ROW_BLOCK * n, |bi, cc| {
        let r0 = bi * GEMM_ROW_BLOCK;
        let rows = cc.len() / n;
        let a_off = r0 as isize * rsa;
        let a_sub = &a[a_off as usize..];
        T::gemm(rows, k, n, alpha, a_sub, rsa, csa, b, rsb, csb, beta, cc, n as isize, 1);
    });
}

/// Few-row `a @ bᵀ`: packing `b` for a blocked kernel would cost as much as the product.
#[allow(clippy::too_many_arguments)]
fn gemm_nt_dots<T: Scalar>(m: usize, k: usize, n: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    for r in 0..m {
        let ar = &a[r * k..(r + 1) * k];
        let row = &mut c[r * n..(r + 1) * n];
        let work = |bi: usize, cc: &mut [T]| {
            for (jj, o) in cc.iter_mut().enumerate() {
                let j = bi * DOT_COL_BLOCK + jj;
                let v = alpha * dot_lanes(ar, &b[j * k..(j + 1) * k]);
                *o = if beta == T::zero() { v } else { v + beta * *o };
            }
        };
        if n * k < 1 << 16 {
            work(0, row);
        } else {
            par::for_each_chunk_mut(row, DOT_COL_BLOCK, work);
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `a[m×k] @ b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(Trans::N, Trans::N, m, k, n, T::one(), a, b, T::zero(), &mut c);
    c
}

/// `a[m×k] @ b[n×k]ᵀ`: the linear-layer product with a row-major `out×in` weight.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(Trans::N, Trans::T, m, k, n, T::one(), a, b, T::zero(), &mut c);
    c
}

/// Dot product.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// RMS-normalize each `d`-wide row of `x` into `out`, returning the per-row `1/rms`.
pub fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> Vec<T> {
    let d = gain.len();
    let rows = x.len() / d;
    let dn: T = s(d as f64);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().fold(T::zero(), |a, &v| a + v * v) / dn;
        let ir = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = v * ir * g;
        }
        inv.push(ir);
    }
    inv
}

/// Backward of [`rms_norm_rows`]: accumulates into `dx` and `dgain`.
pub fn rms_norm_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv_rms: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
) {
    let d = gain.len();
    let dn: T = s(d as f64);
    if let Some(dg) = dgain {
        for (r, &ir) in inv_rms.iter().enumerate() {
            let xr = &x[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            for j in 0..d {
                dg[j] = dg[j] + dyr[j] * xr[j] * ir;
            }
        }
    }
    if let Some(dx) = dx {
        for (r, &ir) in inv_rms.iter().enumerate() {
            let xr = &x[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            // y_j = g_j x_j r;  dx_i = r g_i dy_i - r^3 x_i / d * sum_j dy_j g_j x_j
            let proj = (0..d).fold(T::zero(), |a, j| a + dyr[j] * gain[j] * xr[j]);
            let c = ir * ir * ir * proj / dn;
            for i in 0..d {
                dx[r * d + i] = dx[r * d + i] + ir * gain[i] * dyr[i] - c * xr[i];
            }
        }
    }
}

/// In-place numerically stabilized softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// One query row against a token's slices: `p = softmax(kt q)` and `o = vtᵀ p`.
/// `kt` is `d_t×d_in`, `vt` is `d_t×d_emb`. Every L3 forward goes through this
/// so batched and per-row execution round identically.
pub fn attend_row<T: Scalar>(q: &[T], kt: &[T], vt: &[T], p: &mut [T], o: &mut [T]) {
    let d_in = q.len();
    let d_emb = o.len();
    for (j, pj) in p.iter_mut().enumerate() {
        *pj = dot_lanes(q, &kt[j * d_in..(j + 1) * d_in]);
    }
    softmax_in_place(p);
    o.fill(T::zero());
    for (j, &pj) in p.iter().enumerate() {
        for (oe, &v) in o.iter_mut().zip(&vt[j * d_emb..(j + 1) * d_emb]) {
            *oe = *oe + pj * v;
        }
    }
}

/// Given softmax output `p` and upstream `dp`, accumulate `ds = p ⊙ (dp − ⟨dp, p⟩)` into `ds`.
pub fn softmax_backward_row<T: Scalar>(p: &[T], dp: &[T], ds: &mut [T]) {
    let inner = dot(p, dp);
    for ((o, &pi), &g) in ds.iter_mut().zip(p).zip(dp) {
        *o = *o + pi * (g - inner);
    }
}

/// `log Σ exp(row)`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp()).ln()
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let sg = T::one() / (T::one() + (-x).exp());
    sg * (T::one() + x * (T::one() - sg))
}

/// Rotary embedding tables for one position: `(cos, sin)` for each of `head_dim/2` frequency pairs.
pub fn rope_angles<T: Scalar>(pos: usize, head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(half);
    let mut sin = Vec::with_capacity(half);
    for i in 0..half {
        let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
        let ang = pos as f64 * freq;
        cos.push(s(ang.cos()));
        sin.push(s(ang.sin()));
    }
    (cos, sin)
}

/// Rotate one `d_model` row in place, head by head (rotate-half pairing).
/// `inverse` applies the opposite rotation.
pub fn rope_row<T: Scalar>(row: &mut [T], head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = head_dim / 2;
    for h in row.chunks_mut(head_dim) {
        for i in 0..half {
            let (a, b) = (h[i], h[i + half]);
            let (c, sn) = if inverse { (cos[i], -sin[i]) } else { (cos[i], sin[i]) };
            h[i] = a * c - b * sn;
            h[i + half] = b * c + a * sn;
        }
    }
}

/// Causal multi-head attention of `m` query rows against a key/value history of `total` rows,
/// where query row `i` sits at history position `total - m + i`.
///
/// `q` is `m×d`, `k` and `v` are `total×d`; heads occupy contiguous `head_dim` column blocks.
/// Returns `(out[m×d], probs[heads×m×total])`; masked probabilities are exactly zero.
pub fn causal_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    m: usize,
    total: usize,
    n_heads: usize,
    head_dim: usize,
) -> (Vec<T>, Vec<T>) {
    let d = n_heads * head_dim;
    let scale: T = s(1.0 / (head_dim as f64).sqrt());
    let offset = total - m;
    let per_head: Vec<(Vec<T>, Vec<T>)> = par::map_range(n_heads, |h| {
        let mut scores = vec![T::zero(); m * total];
        T::gemm(
            m,
            head_dim,
            total,
            scale,
            &q[h * head_dim..],
            d as isize,
            1,
            &k[h * head_dim..],
            1,
            d as isize,
            T::zero(),
            &mut scores,
            total as isize,
            1,
        );
        for i in 0..m {
            let visible = offset + i + 1;
            let row = &mut scores[i * total..(i + 1) * total];
            softmax_in_place(&mut row[..visible]);
            for x in &mut row[visible..] {
                *x = T::zero();
            }
        }
        let mut o = vec![T::zero(); m * head_dim];
        T::gemm(
            m,
            total,
            head_dim,
            T::one(),
            &scores,
            total as isize,
            1,
            &v[h * head_dim..],
            d as isize,
            1,
            T::zero(),
            &mut o,
            head_dim as isize,
            1,
        );
        (o, scores)
    });
    let mut out = vec![T::zero(); m * d];
    let mut probs = Vec::with_capacity(n_heads * m * total);
    for (h, (o, p)) in per_head.into_iter().enumerate() {
        for i in 0..m {
            out[i * d + h * head_dim..i * d + (h + 1) * head_dim]
                .copy_from_slice(&o[i * head_dim..(i + 1) * head_dim]);
        }
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_triple_loop() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 97) as f64) / 40.0 - 1.2).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul(&a, &b, m, k, n);
        let bt = transpose(&b, k, n);
        let got_nt = matmul_nt(&a, &bt, m, k, n);
        let at = transpose(&a, m, k);
        let mut got_tn = vec![0.0; m * n];
        gemm(Trans::T, Trans::N, m, k, n, 1.0, &at, &b, 0.0, &mut got_tn);
        for i in 0..m * n {
            assert!((want[i] - got[i]).abs() < 1e-12);
            assert!((want[i] - got_nt[i]).abs() < 1e-12);
            assert!((want[i] - got_tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn few_row_products_match_triple_loop() {
        for (m, k, n) in [(1, 300, 270), (3, 17, 5), (4, 256, 300), (2, 1, 1)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 89) as f64) / 40.0 - 1.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 47 % 83) as f64) / 30.0 - 1.3).collect();
            let want = naive(&a, &b, m, k, n);
            let bt = transpose(&b, k, n);
            let mut c = vec![1.5; m * n];
            gemm(Trans::N, Trans::T, m, k, n, 2.0, &a, &bt, 0.5, &mut c);
            for i in 0..m * n {
                assert!((2.0 * want[i] + 0.75 - c[i]).abs() < 1e-10, "{m}x{k}x{n} at {i}");
            }
            let mut c = vec![f64::NAN; m * n];
            gemm(Trans::N, Trans::T, m, k, n, 1.0, &a, &bt, 0.0, &mut c);
            assert!(c.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn attend_row_is_softmax_weighted_values() {
        let (d_in, dt, d_emb) = (11, 5, 3);
        let q: Vec<f64> = (0..d_in).map(|i| (i as f64 * 0.7).sin()).collect();
        let kt: Vec<f64> = (0..dt * d_in).map(|i| (i as f64 * 0.3).cos()).collect();
        let vt: Vec<f64> = (0..dt * d_emb).map(|i| i as f64 - 6.0).collect();
        let mut want = naive(&q, &transpose(&kt, dt, d_in), 1, d_in, dt);
        softmax_in_place(&mut want);
        let want_o = naive(&want, &vt, 1, dt, d_emb);
        let (mut p, mut o) = (vec![0.0; dt], vec![f64::NAN; d_emb]);
        attend_row(&q, &kt, &vt, &mut p, &mut o);
        for (a, b) in p.iter().zip(&want).chain(o.iter().zip(&want_o)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_inverse_restores_row() {
        let (cos, sin) = rope_angles::<f64>(7, 8, 10000.0);
        let orig: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        let mut r = orig.clone();
        rope_row(&mut r, 8, &cos, &sin, false);
        assert!(r.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_row(&mut r, 8, &cos, &sin, true);
        for (a, b) in r.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_first_row_copies_first_value() {
        let (n_heads, hd, total) = (2, 4, 3);
        let d = n_heads * hd;
        let q: Vec<f64> = (0..total * d).map(|i| (i as f64).sin()).collect();
        let k: Vec<f64> = (0..total * d).map(|i| (i as f64 * 0.7).cos()).collect();
        let v: Vec<f64> = (0..total * d).map(|i| i as f64).collect();
        let (out, probs) = causal_attention(&q, &k, &v, total, total, n_heads, hd);
        assert_eq!(&out[..d], &v[..d]);
        assert_eq!(probs[1], 0.0);
        assert_eq!(probs[2], 0.0);
    }
}
