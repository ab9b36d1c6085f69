//! Desk-scale decoder-only transformer with optional large lookup layers.
//!
//! Blocks are Llama-style: pre-RMSNorm causal attention with rotary positions,
//! then a pre-RMSNorm SwiGLU MLP, both residual. An L3 layer runs after each
//! configured block index and, by default, replaces the hidden stream with its
//! output (the input is part of its concatenation).

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationTable;
use crate::error::{bail, Result};
use crate::layer::{l3_flops, l3_forward_graph, make_sort_plan, linear_init, ExecPath, L3Dims, L3Params, L3Vars, NORM_EPS};
use crate::numeric::kernels;
use crate::numeric::scalar::s;
use crate::numeric::{Graph, Scalar, Tensor, Var};
use crate::par;

pub const ROPE_BASE: f64 = 10_000.0;
/// Recorded in checkpoints: every matrix is uniform in `±1/sqrt(row length)`, gains are ones.
pub const INIT_SCHEME: &str = "uniform_fan_in_row";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::L3Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => bail!(Config, "unknown precision {:?} (expected f32 or f64)", other),
        }
    }
}

fn default_rope() -> f64 {
    ROPE_BASE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub context_length: usize,
    /// Block indices after which an L3 layer runs.
    #[serde(default)]
    pub l3_positions: Vec<usize>,
    pub l3_d_emb: usize,
    pub l3_d_up: usize,
    /// Allocation file the L3 layers were built from (informational once checkpointed).
    #[serde(default)]
    pub allocation: Option<String>,
    #[serde(default)]
    pub tie_kv: bool,
    /// Add the L3 output to the stream instead of replacing it.
    #[serde(default)]
    pub l3_residual: bool,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rope")]
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2048,
            n_layers: 8,
            d_model: 256,
            n_heads: 4,
            head_dim: 64,
            d_ff: 1024,
            context_length: 256,
            l3_positions: Vec::new(),
            l3_d_emb: 256,
            l3_d_up: 2048,
            allocation: None,
            tie_kv: false,
            l3_residual: false,
            precision: Precision::F32,
            seed: 0,
            rope_base: ROPE_BASE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.vocab_size == 0 || c.n_layers == 0 || c.d_model == 0 || c.n_heads == 0 || c.d_ff == 0 || c.context_length == 0 {
            bail!(Config, "model dimensions must be positive");
        }
        if c.d_model != c.n_heads * c.head_dim {
            bail!(Config, "d_model {} != n_heads {} * head_dim {}", c.d_model, c.n_heads, c.head_dim);
        }
        if c.head_dim % 2 != 0 {
            bail!(Config, "rotary embeddings need an even head_dim, got {}", c.head_dim);
        }
        if c.l3_positions.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "l3_positions must be strictly increasing: {:?}", c.l3_positions);
        }
        if let Some(&p) = c.l3_positions.iter().find(|&&p| p >= c.n_layers) {
            bail!(Config, "L3 position {} is not below n_layers {}", p, c.n_layers);
        }
        if !c.l3_positions.is_empty() {
            if c.l3_d_emb == 0 || c.l3_d_up == 0 {
                bail!(Config, "L3 widths must be positive");
            }
            if c.tie_kv && c.l3_d_emb != c.d_model {
                bail!(Config, "tied keys/values need l3_d_emb == d_model");
            }
        }
        Ok(())
    }

    pub fn l3_dims(&self) -> L3Dims {
        L3Dims {
            d_in: self.d_model,
            d_emb: self.l3_d_emb,
            d_up: self.l3_d_up,
            d_out: self.d_model,
        }
    }

    pub fn has_l3(&self) -> bool {
        !self.l3_positions.is_empty()
    }

    /// Parameters of one decoder block.
    pub fn block_params(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 3 * d * self.d_ff
    }

    /// Parameters of the model without L3 layers.
    pub fn dense_params(&self) -> usize {
        2 * self.vocab_size * self.d_model + self.n_layers * self.block_params() + self.d_model
    }

    /// Parameters of one L3 layer holding `v` embeddings.
    pub fn l3_layer_params(&self, v: usize) -> usize {
        let d = self.l3_dims();
        let tables = if self.tie_kv { v * d.d_in } else { v * (d.d_in + d.d_emb) };
        tables + d.d_up * d.d_emb + d.d_out * (d.d_in + d.d_up) + d.d_in + d.d_up
    }

    pub fn total_params(&self, v: usize) -> usize {
        self.dense_params() + self.l3_positions.len() * self.l3_layer_params(v)
    }

    /// Forward FLOPs per token excluding L3 layers, with attention cost averaged
    /// over positions of a full context window.
    pub fn decoder_flops_per_token(&self) -> f64 {
        let d = self.d_model as f64;
        let proj = 2.0 * (4.0 * d * d + 3.0 * d * self.d_ff as f64);
        let avg_ctx = (self.context_length as f64 + 1.0) / 2.0;
        let attn = 4.0 * d * avg_ctx;
        self.n_layers as f64 * (proj + attn) + 2.0 * self.vocab_size as f64 * d
    }
}

/// Mean forward FLOPs of one L3 layer over the positions of `stream`.
pub fn expected_l3_flops(alloc: &AllocationTable, stream: &[u32], dims: L3Dims) -> f64 {
    if stream.is_empty() {
        return 0.0;
    }
    let sum: u128 = stream.iter().map(|&t| l3_flops(alloc.count(t) as u64, dims).total as u128).sum();
    sum as f64 / stream.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn init(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = c.d_model;
        Block {
            attn_norm: Tensor::ones(&[d]),
            wq: linear_init(d, d, rng),
            wk: linear_init(d, d, rng),
            wv: linear_init(d, d, rng),
            wo: linear_init(d, d, rng),
            mlp_norm: Tensor::ones(&[d]),
            w_gate: linear_init(c.d_ff, d, rng),
            w_up: linear_init(c.d_ff, d, rng),
            w_down: linear_init(d, c.d_ff, rng),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    /// One per entry of `config.l3_positions`, in order.
    pub l3: Vec<L3Params<T>>,
    pub final_norm: Tensor<T>,
    pub unemb: Tensor<T>,
    pub alloc: Option<Arc<AllocationTable>>,
}

/// Build and initialize a model from `config.seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, alloc: Option<Arc<AllocationTable>>) -> Result<Model<T>> {
    config.validate()?;
    if T::NAME != config.precision.name() {
        bail!(Config, "config asks for {} but the model is built in {}", config.precision.name(), T::NAME);
    }
    if config.has_l3() {
        match &alloc {
            None => bail!(Config, "L3 positions configured but no allocation table given"),
            Some(a) if a.vocab_size() != config.vocab_size => {
                bail!(Config, "allocation vocab {} != model vocab {}", a.vocab_size(), config.vocab_size)
            }
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let tok_emb = linear_init(config.vocab_size, d, &mut rng);
    let blocks = (0..config.n_layers).map(|_| Block::init(config, &mut rng)).collect();
    let mut l3 = Vec::new();
    for _ in &config.l3_positions {
        let a = alloc.clone().expect("checked above");
        l3.push(L3Params::init(config.l3_dims(), a, config.tie_kv, &mut rng)?);
    }
    let unemb = linear_init(config.vocab_size, d, &mut rng);
    Ok(Model {
        config: config.clone(),
        tok_emb,
        blocks,
        l3,
        final_norm: Tensor::ones(&[d]),
        unemb,
        alloc: if config.has_l3() { alloc } else { None },
    })
}

/// Where a hidden state is observed during the inference forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    /// Output of decoder block `i` (the input of an L3 layer placed after it).
    Block(usize),
    /// Output of L3 layer `j`.
    L3(usize),
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::Block(i) => write!(f, "block{i}"),
            Site::L3(j) => write!(f, "l3_{j}"),
        }
    }
}

/// Owned `(K_t, V_t)` rows for one token of one L3 layer.
pub type L3Slices<T> = (Vec<T>, Vec<T>);

/// Callbacks into the tape-free forward.
pub trait ForwardHooks<T: Scalar> {
    /// Called before decoder block `layer` runs.
    fn before_block(&mut self, _layer: usize) -> Result<()> {
        Ok(())
    }
    /// Supply the embedding slices for L3 layer `l3` and `token`; `None` reads the resident tables.
    fn l3_slices(&mut self, _l3: usize, _token: u32) -> Result<Option<L3Slices<T>>> {
        Ok(None)
    }
    /// Observe hidden rows (`m×d_model`) at `site` for input `tokens`.
    fn observe(&mut self, _site: Site, _hidden: &[T], _tokens: &[u32]) {}
}

/// Hooks that do nothing.
pub struct NoHooks;
impl<T: Scalar> ForwardHooks<T> for NoHooks {}

/// Per-block key/value history for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Graph handles of one decoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub l3: Vec<L3Vars>,
    pub final_norm: Var,
    pub unemb: Var,
    /// Every trainable handle in [`Model::named_tensors`] order.
    pub order: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Active parameters per token at a given mean L3 allocation `mean_dt`.
    pub fn active_params(&self, mean_dt: f64) -> f64 {
        let dense: usize = self.num_params() - self.l3.iter().map(|p| p.wk.len() + p.wv.as_ref().map_or(0, |t| t.len())).sum::<usize>();
        let per_row: f64 = self
            .l3
            .iter()
            .map(|p| (p.dims.d_in + if p.tied() { 0 } else { p.dims.d_emb }) as f64)
            .sum();
        dense as f64 + mean_dt * per_row
    }

    /// Parameter tensors with stable names, in the optimizer and checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        for (j, p) in self.l3.iter().enumerate() {
            let names: &[&str] = if p.tied() {
                &["wk", "w_up", "w_mix", "norm_in", "norm_out"]
            } else {
                &["wk", "wv", "w_up", "w_mix", "norm_in", "norm_out"]
            };
            for (n, t) in names.iter().zip(p.tensors()) {
                out.push((format!("l3.{j}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unemb".to_string(), &self.unemb));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        for p in &mut self.l3 {
            out.extend(p.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unemb);
        out
    }

    /// Weight decay applies to matrices, not to norm gains.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.named_tensors().iter().map(|(_, t)| t.shape().len() > 1).collect()
    }

    /// Index into `self.l3` of the layer running after block `layer`.
    pub fn l3_after(&self, layer: usize) -> Option<usize> {
        self.config.l3_positions.iter().position(|&p| p == layer)
    }

    pub fn register(&self, g: &mut Graph<T>) -> ModelVars {
        let mut order = Vec::new();
        let p = |g: &mut Graph<T>, t: &Tensor<T>, order: &mut Vec<Var>| {
            let v = g.param(t.clone());
            order.push(v);
            v
        };
        let tok_emb = p(g, &self.tok_emb, &mut order);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: p(g, &b.attn_norm, &mut order),
                wq: p(g, &b.wq, &mut order),
                wk: p(g, &b.wk, &mut order),
                wv: p(g, &b.wv, &mut order),
                wo: p(g, &b.wo, &mut order),
                mlp_norm: p(g, &b.mlp_norm, &mut order),
                w_gate: p(g, &b.w_gate, &mut order),
                w_up: p(g, &b.w_up, &mut order),
                w_down: p(g, &b.w_down, &mut order),
            })
            .collect();
        let l3 = self
            .l3
            .iter()
            .map(|l| {
                let vars = l.register(g);
                order.push(vars.wk);
                if !l.tied() {
                    order.push(vars.wv);
                }
                order.extend([vars.w_up, vars.w_mix, vars.norm_in, vars.norm_out]);
                vars
            })
            .collect();
        let final_norm = p(g, &self.final_norm, &mut order);
        let unemb = p(g, &self.unemb, &mut order);
        ModelVars {
            tok_emb,
            blocks,
            l3,
            final_norm,
            unemb,
            order,
        }
    }

    /// Record the forward pass of `tokens` (consecutive sequences of `seq_len`) and
    /// return the logits (`n×vocab`).
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &ModelVars, tokens: &[u32], seq_len: usize) -> Result<Var> {
        let c = &self.config;
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            bail!(Contract, "{} tokens do not split into sequences of {}", tokens.len(), seq_len);
        }
        if seq_len > c.context_length {
            bail!(Contract, "sequence length {} exceeds context {}", seq_len, c.context_length);
        }
        let idx = self.check_tokens(tokens)?;
        let mut h = g.gather_rows(vars.tok_emb, &idx)?;
        let plan = match &self.alloc {
            Some(a) if c.has_l3() => Some(make_sort_plan(tokens, a)?),
            _ => None,
        };
        for (i, bv) in vars.blocks.iter().enumerate() {
            let xn = g.rms_norm(h, bv.attn_norm, NORM_EPS)?;
            let q = g.matmul_nt(xn, bv.wq)?;
            let k = g.matmul_nt(xn, bv.wk)?;
            let v = g.matmul_nt(xn, bv.wv)?;
            let q = g.rope(q, c.head_dim, seq_len, c.rope_base)?;
            let k = g.rope(k, c.head_dim, seq_len, c.rope_base)?;
            let a = g.causal_attention(q, k, v, c.n_heads, seq_len)?;
            let o = g.matmul_nt(a, bv.wo)?;
            h = g.add(h, o)?;
            let xn = g.rms_norm(h, bv.mlp_norm, NORM_EPS)?;
            let gate = g.matmul_nt(xn, bv.w_gate)?;
            let up = g.matmul_nt(xn, bv.w_up)?;
            let gate = g.silu(gate);
            let act = g.mul(gate, up)?;
            let down = g.matmul_nt(act, bv.w_down)?;
            h = g.add(h, down)?;
            if let Some(j) = self.l3_after(i) {
                let alloc = self.alloc.as_ref().expect("L3 models carry an allocation");
                let out = l3_forward_graph(g, h, tokens, &vars.l3[j], alloc, ExecPath::Sorted, plan.as_ref())?;
                h = if c.l3_residual { g.add(h, out)? } else { out };
            }
        }
        let hn = g.rms_norm(h, vars.final_norm, NORM_EPS)?;
        g.matmul_nt(hn, vars.unemb)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab_size {
                    Ok(t as usize)
                } else {
                    bail!(Index, "token {} out of range for vocab {}", t, self.config.vocab_size)
                }
            })
            .collect()
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache {
            k: vec![Vec::new(); self.blocks.len()],
            v: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }

    /// Logits for `tokens` as one sequence starting at position 0.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut cache = self.new_cache();
        let logits = self.forward_with(tokens, &mut cache, &mut NoHooks)?;
        Tensor::new(vec![tokens.len(), self.config.vocab_size], logits)
    }

    /// Process `tokens` as the continuation of `cache`, returning their logits (`m×vocab`).
    pub fn forward_with(&self, tokens: &[u32], cache: &mut KvCache<T>, hooks: &mut dyn ForwardHooks<T>) -> Result<Vec<T>> {
        let h = self.hidden_with(tokens, cache, hooks)?;
        Ok(self.logits(&h))
    }

    /// Final-norm and unembedding of hidden rows.
    pub fn logits(&self, hidden: &[T]) -> Vec<T> {
        head_logits(hidden, self.final_norm.data(), self.unemb.data(), self.config.vocab_size)
    }

    /// Hidden rows after the last block/L3 layer, before the final norm.
    pub fn hidden_with(&self, tokens: &[u32], cache: &mut KvCache<T>, hooks: &mut dyn ForwardHooks<T>) -> Result<Vec<T>> {
        let c = &self.config;
        let m = tokens.len();
        if m == 0 {
            bail!(Contract, "empty input");
        }
        if cache.len + m > c.context_length {
            bail!(Contract, "{} positions exceed context length {}", cache.len + m, c.context_length);
        }
        let idx = self.check_tokens(tokens)?;
        let d = c.d_model;
        let mut h = Vec::with_capacity(m * d);
        for &t in &idx {
            h.extend_from_slice(self.tok_emb.row(t));
        }
        let eps: T = s(NORM_EPS);
        let angles: Vec<(Vec<T>, Vec<T>)> = (0..m).map(|i| kernels::rope_angles(cache.len + i, c.head_dim, c.rope_base)).collect();
        let mut xn = vec![T::zero(); m * d];
        for (i, b) in self.blocks.iter().enumerate() {
            hooks.before_block(i)?;
            kernels::rms_norm_rows(&h, b.attn_norm.data(), eps, &mut xn);
            let mut q = kernels::matmul_nt(&xn, b.wq.data(), m, d, d);
            let mut k = kernels::matmul_nt(&xn, b.wk.data(), m, d, d);
            let v = kernels::matmul_nt(&xn, b.wv.data(), m, d, d);
            for (r, (cos, sin)) in angles.iter().enumerate() {
                kernels::rope_row(&mut q[r * d..(r + 1) * d], c.head_dim, cos, sin, false);
                kernels::rope_row(&mut k[r * d..(r + 1) * d], c.head_dim, cos, sin, false);
            }
            cache.k[i].extend_from_slice(&k);
            cache.v[i].extend_from_slice(&v);
            let total = cache.len + m;
            let (a, _) = kernels::causal_attention(&q, &cache.k[i], &cache.v[i], m, total, c.n_heads, c.head_dim);
            let o = kernels::matmul_nt(&a, b.wo.data(), m, d, d);
            h.iter_mut().zip(&o).for_each(|(x, &y)| *x = *x + y);
            kernels::rms_norm_rows(&h, b.mlp_norm.data(), eps, &mut xn);
            let gate = kernels::matmul_nt(&xn, b.w_gate.data(), m, d, c.d_ff);
            let up = kernels::matmul_nt(&xn, b.w_up.data(), m, d, c.d_ff);
            let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| kernels::silu(g) * u).collect();
            let down = kernels::matmul_nt(&act, b.w_down.data(), m, c.d_ff, d);
            h.iter_mut().zip(&down).for_each(|(x, &y)| *x = *x + y);
            hooks.observe(Site::Block(i), &h, tokens);
            if let Some(j) = self.l3_after(i) {
                let slices: Vec<Option<L3Slices<T>>> = tokens.iter().map(|&t| hooks.l3_slices(j, t)).collect::<Result<_>>()?;
                let rows: Vec<Option<(&[T], &[T])>> = slices.iter().map(|o| o.as_ref().map(|(k, v)| (&k[..], &v[..]))).collect();
                let out = self.l3[j].forward_rows(&h, tokens, &rows)?;
                if c.l3_residual {
                    h.iter_mut().zip(&out).for_each(|(x, &y)| *x = *x + y);
                } else {
                    h = out;
                }
                hooks.observe(Site::L3(j), &h, tokens);
            }
        }
        cache.len += m;
        Ok(h)
    }

    /// Observation sites in forward order; the last one feeds the output head.
    pub fn sites(&self) -> Vec<Site> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            out.push(Site::Block(i));
            if let Some(j) = self.l3_after(i) {
                out.push(Site::L3(j));
            }
        }
        out
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut config = self.config.clone();
        config.precision = U::NAME.parse().expect("scalar names are valid precisions");
        let cb = |b: &Block<T>| Block {
            attn_norm: b.attn_norm.cast(),
            wq: b.wq.cast(),
            wk: b.wk.cast(),
            wv: b.wv.cast(),
            wo: b.wo.cast(),
            mlp_norm: b.mlp_norm.cast(),
            w_gate: b.w_gate.cast(),
            w_up: b.w_up.cast(),
            w_down: b.w_down.cast(),
        };
        Model {
            config,
            tok_emb: self.tok_emb.cast(),
            blocks: self.blocks.iter().map(cb).collect(),
            l3: self
                .l3
                .iter()
                .map(|p| L3Params {
                    dims: p.dims,
                    wk: p.wk.cast(),
                    wv: p.wv.as_ref().map(|t| t.cast()),
                    w_up: p.w_up.cast(),
                    w_mix: p.w_mix.cast(),
                    norm_in: p.norm_in.cast(),
                    norm_out: p.norm_out.cast(),
                    alloc: p.alloc.clone(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unemb: self.unemb.cast(),
            alloc: self.alloc.clone(),
        }
    }
}

/// RMS-norm with `gain` then project on `unemb` (`vocab×d`).
pub fn head_logits<T: Scalar>(hidden: &[T], gain: &[T], unemb: &[T], vocab: usize) -> Vec<T> {
    let d = gain.len();
    let m = hidden.len() / d;
    let mut hn = vec![T::zero(); hidden.len()];
    kernels::rms_norm_rows(hidden, gain, s(NORM_EPS), &mut hn);
    kernels::matmul_nt(&hn, unemb, m, d, vocab)
}

/// Summed negative log-likelihood of `targets` under row-wise `logits`, in 64-bit.
pub fn nll_sum<T: Scalar>(logits: &[T], targets: &[u32], vocab: usize) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row: Vec<f64> = logits[i * vocab..(i + 1) * vocab].iter().map(|x| x.to_f64().unwrap()).collect();
            kernels::log_sum_exp(&row) - row[t as usize]
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub nll_sum: f64,
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// Perplexity over non-overlapping windows of `context` predictions. Windows are
/// evaluated in parallel and reduced in order.
pub fn eval_perplexity<T: Scalar>(model: &Model<T>, stream: &[u32], context: usize, max_tokens: Option<usize>) -> Result<EvalResult> {
    let stream = match max_tokens {
        Some(n) if n + 1 < stream.len() => &stream[..n + 1],
        _ => stream,
    };
    if stream.len() < 2 {
        bail!(Contract, "evaluation needs at least two tokens, got {}", stream.len());
    }
    let context = context.min(model.config.context_length).max(1);
    let n_pred = stream.len() - 1;
    let n_win = n_pred.div_ceil(context);
    let parts: Vec<Result<(f64, usize)>> = par::map_range(n_win, |w| {
        let start = w * context;
        let end = (start + context).min(n_pred);
        let logits = model.forward(&stream[start..end])?;
        Ok((nll_sum(logits.data(), &stream[start + 1..end + 1], model.config.vocab_size), end - start))
    });
    let mut nll = 0.0;
    let mut tokens = 0;
    for p in parts {
        let (a, b) = p?;
        nll += a;
        tokens += b;
    }
    let mean = nll / tokens as f64;
    Ok(EvalResult {
        nll_sum: nll,
        tokens,
        mean_nll: mean,
        perplexity: mean.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::uniform_allocate;

    fn tiny(l3: Vec<usize>, tie: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            d_ff: 12,
            context_length: 16,
            l3_positions: l3,
            l3_d_emb: 8,
            l3_d_up: 10,
            tie_kv: tie,
            precision: Precision::F64,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny(vec![1, 1], false);
        assert!(c.validate().is_err());
        c.l3_positions = vec![3];
        assert!(c.validate().is_err());
        c.l3_positions = vec![0, 2];
        c.validate().unwrap();
        c.head_dim = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dense_param_count_closed_form() {
        let c = tiny(vec![], false);
        let m = build_model::<f64>(&c, None).unwrap();
        assert_eq!(m.num_params(), c.dense_params());
        assert_eq!(m.active_params(0.0), m.num_params() as f64);
    }

    #[test]
    fn l3_param_count_closed_form() {
        let alloc = Arc::new(uniform_allocate(11, 3).unwrap());
        for tie in [false, true] {
            let c = tiny(vec![1], tie);
            let m = build_model::<f64>(&c, Some(alloc.clone())).unwrap();
            assert_eq!(m.num_params(), c.total_params(33));
            assert_eq!(m.num_params(), c.dense_params() + c.l3_layer_params(33));
        }
        let untied = tiny(vec![1], false).l3_layer_params(33);
        let tied = tiny(vec![1], true).l3_layer_params(33);
        assert_eq!(untied - tied, 33 * 8);
    }

    #[test]
    fn l3_requires_allocation() {
        assert!(build_model::<f64>(&tiny(vec![0], false), None).is_err());
        let wrong = Arc::new(uniform_allocate(5, 1).unwrap());
        assert!(build_model::<f64>(&tiny(vec![0], false), Some(wrong)).is_err());
        assert!(build_model::<f32>(&tiny(vec![], false), None).is_err());
    }

    #[test]
    fn graph_and_inference_forward_agree() {
        let alloc = Arc::new(uniform_allocate(11, 3).unwrap());
        for (pos, resid) in [(vec![], false), (vec![0, 2], false), (vec![1], true)] {
            let mut c = tiny(pos, false);
            c.l3_residual = resid;
            let m = build_model::<f64>(&c, Some(alloc.clone())).unwrap();
            let toks = [1u32, 5, 5, 0, 10, 3, 1, 1];
            let mut g = Graph::new();
            let vars = m.register(&mut g);
            let lg = m.forward_graph(&mut g, &vars, &toks, 8).unwrap();
            let inf = m.forward(&toks).unwrap();
            assert!(g.value(lg).max_abs_diff(&inf) < 1e-12);
        }
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let alloc = Arc::new(uniform_allocate(11, 2).unwrap());
        let m = build_model::<f64>(&tiny(vec![1], false), Some(alloc)).unwrap();
        let toks = [3u32, 4, 9, 9, 2];
        let full = m.forward(&toks).unwrap();
        let mut cache = m.new_cache();
        let mut rows = m.forward_with(&toks[..2], &mut cache, &mut NoHooks).unwrap();
        for &t in &toks[2..] {
            rows.extend(m.forward_with(&[t], &mut cache, &mut NoHooks).unwrap());
        }
        let max = rows.iter().zip(full.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-12, "{max}");
        assert_eq!(cache.len(), 5);
    }

    #[test]
    fn overlong_input_rejected() {
        let m = build_model::<f64>(&tiny(vec![], false), None).unwrap();
        let toks = vec![1u32; 17];
        assert!(matches!(m.forward(&toks), Err(crate::L3Error::Contract(_))));
        assert!(matches!(m.forward(&[11]), Err(crate::L3Error::Index(_))));
    }

    #[test]
    fn zeroed_unembedding_gives_vocab_perplexity() {
        let mut m = build_model::<f64>(&tiny(vec![], false), None).unwrap();
        m.unemb = Tensor::zeros(&[11, 8]);
        let stream: Vec<u32> = (0..50).map(|i| (i * 7 % 11) as u32).collect();
        let r = eval_perplexity(&m, &stream, 16, None).unwrap();
        assert_eq!(r.tokens, 49);
        assert!((r.perplexity - 11.0).abs() < 1e-9);
        let r2 = eval_perplexity(&m, &stream, 16, None).unwrap();
        assert_eq!(r, r2);
        assert!(eval_perplexity(&m, &[1], 16, None).is_err());
    }

    #[test]
    fn sites_interleave_l3() {
        let alloc = Arc::new(uniform_allocate(11, 1).unwrap());
        let m = build_model::<f64>(&tiny(vec![0, 2], false), Some(alloc)).unwrap();
        assert_eq!(m.sites(), vec![Site::Block(0), Site::L3(0), Site::Block(1), Site::Block(2), Site::L3(1)]);
    }

    #[test]
    fn cast_round_trip_shapes() {
        let m = build_model::<f64>(&tiny(vec![], false), None).unwrap();
        let f: Model<f32> = m.cast();
        assert_eq!(f.config.precision, Precision::F32);
        assert_eq!(f.num_params(), m.num_params());
    }
}
