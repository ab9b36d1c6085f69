//! The large lookup layer.
//!
//! Token `t` owns rows `bounds[t]..bounds[t+1]` of two flat tables, `W_K`
//! (`v×d_in`) and `W_V` (`v×d_emb`). For a hidden row `x`:
//!
//! ```text
//! xn  = rms_norm_in(x)
//! p   = softmax(K_t · xn)                  (d_t scores)
//! a   = V_tᵀ p                             (d_emb)
//! out = W_mix · [ rms_norm_out(W_up · a) ; x ]
//! ```
//!
//! Batched execution sorts rows by token so each token's rows attend to one
//! contiguous embedding slice: a block-diagonal attention with no wasted work.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationTable;
use crate::error::{bail, Result};
use crate::numeric::kernels;
use crate::numeric::{AttnBlock, Graph, Scalar, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct L3Dims {
    pub d_in: usize,
    pub d_emb: usize,
    pub d_up: usize,
    pub d_out: usize,
}

/// Learnable state of one layer. With `tied` keys and values share `wk`.
#[derive(Debug, Clone, PartialEq)]
pub struct L3Params<T> {
    pub dims: L3Dims,
    pub wk: Tensor<T>,
    pub wv: Option<Tensor<T>>,
    pub w_up: Tensor<T>,
    pub w_mix: Tensor<T>,
    pub norm_in: Tensor<T>,
    pub norm_out: Tensor<T>,
    pub alloc: Arc<AllocationTable>,
}

/// Graph handles of an [`L3Params`]; `wv == wk` when tied.
#[derive(Debug, Clone, Copy)]
pub struct L3Vars {
    pub wk: Var,
    pub wv: Var,
    pub w_up: Var,
    pub w_mix: Var,
    pub norm_in: Var,
    pub norm_out: Var,
}

/// `±1/sqrt(fan_in)` uniform, the default initialization of a dense linear layer.
pub(crate) fn linear_init<T: Scalar, R: Rng>(rows: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::uniform(&[rows, fan_in], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl<T: Scalar> L3Params<T> {
    pub fn init<R: Rng>(dims: L3Dims, alloc: Arc<AllocationTable>, tied: bool, rng: &mut R) -> Result<Self> {
        if dims.d_in == 0 || dims.d_emb == 0 || dims.d_up == 0 || dims.d_out == 0 {
            bail!(Config, "L3 dims must be positive: {:?}", dims);
        }
        if tied && dims.d_emb != dims.d_in {
            bail!(Config, "tied keys/values need d_emb == d_in ({} vs {})", dims.d_emb, dims.d_in);
        }
        let v = alloc.total();
        let wk = linear_init(v, dims.d_in, rng);
        let wv = (!tied).then(|| linear_init(v, dims.d_emb, rng));
        let w_up = linear_init(dims.d_up, dims.d_emb, rng);
        let w_mix = linear_init(dims.d_out, dims.d_up + dims.d_in, rng);
        Ok(L3Params {
            dims,
            wk,
            wv,
            w_up,
            w_mix,
            norm_in: Tensor::ones(&[dims.d_in]),
            norm_out: Tensor::ones(&[dims.d_up]),
            alloc,
        })
    }

    pub fn tied(&self) -> bool {
        self.wv.is_none()
    }

    /// Value table (the key table when tied).
    pub fn values(&self) -> &Tensor<T> {
        self.wv.as_ref().unwrap_or(&self.wk)
    }

    /// Copy of these parameters with the value table untied (set to a copy of `W_K` when tied).
    pub fn untied(&self) -> Self {
        let mut p = self.clone();
        if p.wv.is_none() {
            p.wv = Some(p.wk.clone());
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.wk.len()
            + self.wv.as_ref().map_or(0, |t| t.len())
            + self.w_up.len()
            + self.w_mix.len()
            + self.norm_in.len()
            + self.norm_out.len()
    }

    /// Parameter tensors in a fixed order (the value table is skipped when tied).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.wk];
        if let Some(wv) = &self.wv {
            v.push(wv);
        }
        v.extend([&self.w_up, &self.w_mix, &self.norm_in, &self.norm_out]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.wk];
        if let Some(wv) = &mut self.wv {
            v.push(wv);
        }
        v.extend([&mut self.w_up, &mut self.w_mix, &mut self.norm_in, &mut self.norm_out]);
        v
    }

    /// Register every tensor as a trainable leaf.
    pub fn register(&self, g: &mut Graph<T>) -> L3Vars {
        let wk = g.param(self.wk.clone());
        let wv = match &self.wv {
            Some(t) => g.param(t.clone()),
            None => wk,
        };
        L3Vars {
            wk,
            wv,
            w_up: g.param(self.w_up.clone()),
            w_mix: g.param(self.w_mix.clone()),
            norm_in: g.param(self.norm_in.clone()),
            norm_out: g.param(self.norm_out.clone()),
        }
    }

    /// Single-token forward without a tape. `rows` supplies `(K_t, V_t)`; pass
    /// `None` to read them from the resident tables.
    pub fn forward_token(&self, x: &[T], token: u32, rows: Option<(&[T], &[T])>) -> Result<Vec<T>> {
        self.forward_rows(x, &[token], &[rows])
    }

    /// Tape-free forward of `m` rows (`x` is `m×d_in`). `rows[i]` optionally supplies
    /// row `i`'s `(K_t, V_t)` slices; the dense projections run batched.
    pub fn forward_rows(&self, x: &[T], tokens: &[u32], rows: &[Option<(&[T], &[T])>]) -> Result<Vec<T>> {
        let d = self.dims;
        let m = tokens.len();
        if x.len() != m * d.d_in {
            bail!(Dimension, "input of {} values for {} rows of width {}", x.len(), m, d.d_in);
        }
        if rows.len() != m {
            bail!(Contract, "{} slice entries for {} rows", rows.len(), m);
        }
        let eps: T = crate::numeric::scalar::s(NORM_EPS);
        let mut xn = vec![T::zero(); m * d.d_in];
        kernels::rms_norm_rows(x, self.norm_in.data(), eps, &mut xn);
        let mut agg = vec![T::zero(); m * d.d_emb];
        for (i, &token) in tokens.iter().enumerate() {
            if token as usize >= self.alloc.vocab_size() {
                bail!(Index, "token {} out of range for vocab {}", token, self.alloc.vocab_size());
            }
            let range = self.alloc.range(token);
            let dt = range.len();
            let (kt, vt) = match rows[i] {
                Some(r) => r,
                None => (
                    &self.wk.data()[range.start * d.d_in..range.end * d.d_in],
                    &self.values().data()[range.start * d.d_emb..range.end * d.d_emb],
                ),
            };
            if kt.len() != dt * d.d_in || vt.len() != dt * d.d_emb {
                bail!(Contract, "supplied slice sizes do not match d_t = {}", dt);
            }
            let mut p = vec![T::zero(); dt];
            kernels::attend_row(&xn[i * d.d_in..(i + 1) * d.d_in], kt, vt, &mut p, &mut agg[i * d.d_emb..(i + 1) * d.d_emb]);
        }
        let up = kernels::matmul_nt(&agg, self.w_up.data(), m, d.d_emb, d.d_up);
        let w = d.d_up + d.d_in;
        let mut cat = vec![T::zero(); m * w];
        let mut upn = vec![T::zero(); m * d.d_up];
        kernels::rms_norm_rows(&up, self.norm_out.data(), eps, &mut upn);
        for i in 0..m {
            cat[i * w..i * w + d.d_up].copy_from_slice(&upn[i * d.d_up..(i + 1) * d.d_up]);
            cat[i * w + d.d_up..(i + 1) * w].copy_from_slice(&x[i * d.d_in..(i + 1) * d.d_in]);
        }
        Ok(kernels::matmul_nt(&cat, self.w_mix.data(), m, w, d.d_out))
    }

    /// Score distribution `softmax(K_t · norm_in(x))` for one row.
    pub fn scores(&self, x: &[T], token: u32) -> Vec<T> {
        let d = self.dims;
        let range = self.alloc.range(token);
        let kt = &self.wk.data()[range.start * d.d_in..range.end * d.d_in];
        let mut xn = vec![T::zero(); d.d_in];
        kernels::rms_norm_rows(x, self.norm_in.data(), crate::numeric::scalar::s(NORM_EPS), &mut xn);
        let mut p = kernels::matmul_nt(&xn, kt, 1, d.d_in, range.len());
        kernels::softmax_in_place(&mut p);
        p
    }
}

/// Forward/backward permutations and per-token blocks of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortPlan {
    /// `fw[i]` is the batch row placed at sorted position `i`.
    pub fw: Vec<usize>,
    /// Inverse of `fw`.
    pub bw: Vec<usize>,
    pub blocks: Vec<PlanBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanBlock {
    pub token: u32,
    /// Positions in the sorted batch.
    pub rows: Range<usize>,
    /// Embedding rows owned by the token.
    pub emb: Range<usize>,
}

impl SortPlan {
    pub fn batch_len(&self) -> usize {
        self.fw.len()
    }

    /// Blocks expressed as original batch rows, for [`Graph::block_attention`].
    pub fn attn_blocks(&self) -> Vec<AttnBlock> {
        self.blocks
            .iter()
            .map(|b| AttnBlock {
                rows: self.fw[b.rows.clone()].to_vec(),
                emb: b.emb.clone(),
            })
            .collect()
    }
}

/// Stable sort of the batch by token id, grouped into one block per distinct token.
pub fn make_sort_plan(tokens: &[u32], alloc: &AllocationTable) -> Result<SortPlan> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= alloc.vocab_size()) {
        bail!(Index, "token {} out of range for vocab {}", bad, alloc.vocab_size());
    }
    let mut fw: Vec<usize> = (0..tokens.len()).collect();
    fw.sort_by_key(|&i| tokens[i]);
    let mut bw = vec![0; tokens.len()];
    for (i, &f) in fw.iter().enumerate() {
        bw[f] = i;
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    while start < fw.len() {
        let t = tokens[fw[start]];
        let mut end = start + 1;
        while end < fw.len() && tokens[fw[end]] == t {
            end += 1;
        }
        blocks.push(PlanBlock {
            token: t,
            rows: start..end,
            emb: alloc.range(t),
        });
        start = end;
    }
    Ok(SortPlan { fw, bw, blocks })
}

/// How the embedding aggregation is executed on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    /// One small subgraph per row.
    Naive,
    /// Sorted block-diagonal batch.
    Sorted,
}

/// Record the layer on `g` for a batch `x` (`n×d_in`) with token ids `tokens`.
pub fn l3_forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    tokens: &[u32],
    vars: &L3Vars,
    alloc: &AllocationTable,
    path: ExecPath,
    plan: Option<&SortPlan>,
) -> Result<Var> {
    let n = g.value(x).rows();
    if tokens.len() != n {
        bail!(Contract, "{} tokens for a batch of {} rows", tokens.len(), n);
    }
    let xn = g.rms_norm(x, vars.norm_in, NORM_EPS)?;
    let agg = match path {
        ExecPath::Sorted => {
            let owned;
            let plan = match plan {
                Some(p) => p,
                None => {
                    owned = make_sort_plan(tokens, alloc)?;
                    &owned
                }
            };
            if plan.batch_len() != n || plan.blocks.iter().any(|b| plan.fw[b.rows.clone()].iter().any(|&r| tokens[r] != b.token)) {
                bail!(Contract, "sort plan does not belong to this batch");
            }
            g.block_attention(xn, vars.wk, vars.wv, Arc::new(plan.attn_blocks()))?
        }
        ExecPath::Naive => {
            let mut rows = Vec::with_capacity(n);
            for (i, &t) in tokens.iter().enumerate() {
                if t as usize >= alloc.vocab_size() {
                    bail!(Index, "token {} out of range", t);
                }
                let r = alloc.range(t);
                let xi = g.slice_rows(xn, i..i + 1)?;
                let kt = g.slice_rows(vars.wk, r.clone())?;
                let vt = g.slice_rows(vars.wv, r)?;
                let sc = g.matmul_nt(xi, kt)?;
                let p = g.softmax_rows(sc)?;
                rows.push(g.matmul(p, vt)?);
            }
            g.stack_rows(&rows)?
        }
    };
    let up = g.matmul_nt(agg, vars.w_up)?;
    let upn = g.rms_norm(up, vars.norm_out, NORM_EPS)?;
    let cat = g.concat_cols(upn, x)?;
    g.matmul_nt(cat, vars.w_mix)
}

/// Reference forward of one row, straight from the definition.
pub fn l3_forward_naive<T: Scalar>(x: &[T], token: u32, params: &L3Params<T>) -> Result<Vec<T>> {
    params.forward_token(x, token, None)
}

/// Batched forward of `x` (`n×d_in`) through the sorted block-diagonal path.
/// Computes a plan when none is given.
pub fn l3_forward_sorted<T: Scalar>(x: &Tensor<T>, tokens: &[u32], params: &L3Params<T>, plan: Option<&SortPlan>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.register(&mut g);
    let out = l3_forward_graph(&mut g, xv, tokens, &vars, &params.alloc, ExecPath::Sorted, plan)?;
    Ok(g.value(out).clone())
}

/// Forward FLOPs of one layer for one token touching `d_t` embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub key_scoring: u64,
    pub softmax: u64,
    pub value_aggregation: u64,
    pub up_projection: u64,
    /// From the actual mixing-matrix shape `d_out×(d_in+d_up)`.
    pub mixing: u64,
    pub total: u64,
    /// The published closed form `2·d_emb·(d_emb+d_up)`, kept for comparison only.
    pub mixing_published_form: u64,
}

impl FlopsReport {
    /// Difference between the shape-derived and published mixing terms.
    pub fn mixing_discrepancy(&self) -> i64 {
        self.mixing as i64 - self.mixing_published_form as i64
    }
}

pub fn l3_flops(d_t: u64, dims: L3Dims) -> FlopsReport {
    let (d_in, d_emb, d_up, d_out) = (dims.d_in as u64, dims.d_emb as u64, dims.d_up as u64, dims.d_out as u64);
    let key_scoring = 2 * d_t * d_in;
    let softmax = 3 * d_t;
    let value_aggregation = 2 * d_emb * d_t;
    let up_projection = 2 * d_up * d_emb;
    let mixing = 2 * d_out * (d_in + d_up);
    FlopsReport {
        key_scoring,
        softmax,
        value_aggregation,
        up_projection,
        mixing,
        total: key_scoring + softmax + value_aggregation + up_projection + mixing,
        mixing_published_form: 2 * d_emb * (d_emb + d_up),
    }
}

/// Empirical active-parameter expectation of one layer over a token stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveParams {
    /// `E[d_t]` over stream positions.
    pub mean_embeddings: f64,
    /// Embedding-table parameters touched per token on average.
    pub mean_table_params: f64,
    /// Dense parameters used by every token (`W_up`, `W_mix`, norms).
    pub dense_params: usize,
    pub mean_total: f64,
}

pub fn expected_active_l3_params(
    alloc: &AllocationTable,
    stream: &[u32],
    dims: L3Dims,
    tied: bool,
) -> Result<ActiveParams> {
    if stream.is_empty() {
        bail!(Config, "empty token stream");
    }
    let mut sum = 0u64;
    for &t in stream {
        if t as usize >= alloc.vocab_size() {
            bail!(Index, "token {} out of range", t);
        }
        sum += alloc.count(t) as u64;
    }
    let mean = sum as f64 / stream.len() as f64;
    let row = if tied { dims.d_in } else { dims.d_in + dims.d_emb };
    let dense = dims.d_up * dims.d_emb + dims.d_out * (dims.d_in + dims.d_up) + dims.d_in + dims.d_up;
    Ok(ActiveParams {
        mean_embeddings: mean,
        mean_table_params: mean * row as f64,
        dense_params: dense,
        mean_total: mean * row as f64 + dense as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{uniform_allocate, AllocationTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(d_in: usize, d_emb: usize, d_up: usize) -> L3Dims {
        L3Dims { d_in, d_emb, d_up, d_out: d_in }
    }

    #[test]
    fn sort_plan_example() {
        let alloc = uniform_allocate(6, 2).unwrap();
        let p = make_sort_plan(&[5, 2, 5], &alloc).unwrap();
        assert_eq!(p.fw, vec![1, 0, 2]);
        assert_eq!(p.bw, vec![1, 0, 2]);
        assert_eq!(p.blocks.len(), 2);
        assert_eq!((p.blocks[0].token, p.blocks[0].rows.clone()), (2, 0..1));
        assert_eq!((p.blocks[1].token, p.blocks[1].rows.clone()), (5, 1..3));
        assert_eq!(p.blocks[1].emb, 10..12);
    }

    #[test]
    fn sort_plan_degenerate_batches() {
        let alloc = uniform_allocate(4, 1).unwrap();
        let p = make_sort_plan(&[0, 1, 1, 3], &alloc).unwrap();
        assert_eq!(p.fw, vec![0, 1, 2, 3]);
        let p = make_sort_plan(&[2, 2, 2], &alloc).unwrap();
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].rows, 0..3);
        assert!(make_sort_plan(&[4], &alloc).is_err());
    }

    #[test]
    fn flops_plug_ins() {
        let r = l3_flops(512, L3Dims { d_in: 1024, d_emb: 512, d_up: 4096, d_out: 1024 });
        assert_eq!(r.key_scoring, 1_048_576);
        assert_eq!(r.softmax, 1_536);
        assert_eq!(r.value_aggregation, 524_288);
        let one = l3_flops(1, L3Dims { d_in: 1, d_emb: 1, d_up: 1, d_out: 1 });
        assert_eq!(one.total, 13);
        assert_eq!(one.total, one.key_scoring + one.softmax + one.value_aggregation + one.up_projection + one.mixing);
    }

    #[test]
    fn single_embedding_ignores_key_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alloc = Arc::new(uniform_allocate(3, 1).unwrap());
        let mut p = L3Params::<f64>::init(dims(4, 4, 6), alloc, false, &mut rng).unwrap();
        let x = [0.3, -1.0, 0.5, 2.0];
        let a = p.forward_token(&x, 1, None).unwrap();
        for v in &mut p.wk.data_mut()[4..8] {
            *v *= -3.0;
        }
        let b = p.forward_token(&x, 1, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_scores_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let alloc = Arc::new(AllocationTable::from_counts(vec![2, 1], 2).unwrap());
        let mut p = L3Params::<f64>::init(dims(3, 2, 4), alloc, false, &mut rng).unwrap();
        p.wk.data_mut()[..6].iter_mut().for_each(|v| *v = 0.0);
        let x = [1.0, 2.0, -0.5];
        let probs = p.scores(&x, 0);
        assert_eq!(probs, vec![0.5, 0.5]);
        // aggregated value = mean of the two value rows; check through the tail
        let mut q = p.clone();
        let mean: Vec<f64> = (0..2).map(|j| (p.values().data()[j] + p.values().data()[2 + j]) / 2.0).collect();
        q.wv.as_mut().unwrap().data_mut()[..2].copy_from_slice(&mean);
        q.wv.as_mut().unwrap().data_mut()[2..4].copy_from_slice(&mean);
        let a = p.forward_token(&x, 0, None).unwrap();
        let b = q.forward_token(&x, 0, None).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn tied_requires_matching_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let alloc = Arc::new(uniform_allocate(3, 2).unwrap());
        assert!(L3Params::<f32>::init(dims(4, 8, 4), alloc.clone(), true, &mut rng).is_err());
        let p = L3Params::<f32>::init(dims(4, 4, 4), alloc, true, &mut rng).unwrap();
        assert!(p.tied());
        let u = p.untied();
        assert_eq!(u.num_params() - p.num_params(), 6 * 4);
    }

    #[test]
    fn active_params_uniform() {
        let alloc = uniform_allocate(5, 3).unwrap();
        let a = expected_active_l3_params(&alloc, &[0, 1, 4, 4], dims(4, 2, 8), false).unwrap();
        assert_eq!(a.mean_embeddings, 3.0);
        assert_eq!(a.mean_table_params, 18.0);
    }
}
