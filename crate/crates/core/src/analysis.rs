//! Tuned-lens KL profiles and L3 score-distribution statistics.
//!
//! A lens head at a site is a fresh RMS-norm gain and unembedding applied to the
//! hidden state there. Heads start from the model's own final norm and
//! unembedding and are fitted to the model's output distribution by minimizing
//! `KL(final || lens)` over a devset.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::layer::NORM_EPS;
use crate::model::{head_logits, ForwardHooks, Model, Site};
use crate::numeric::{adamw_step, AdamWConfig, Graph, OptimizerState, Scalar, Tensor};
use crate::par;

/// `ln(v) - H(p)`: divergence of `p` from the uniform distribution on its support size.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    (p.len() as f64).ln() - entropy(p)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Row-wise log-softmax in 64-bit.
fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = crate::numeric::kernels::log_sum_exp(row);
    row.iter().map(|&x| x - lse).collect()
}

/// `KL(p || q)` for distributions given as logits rows.
pub fn kl_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensHead<T> {
    pub site: Site,
    pub gain: Tensor<T>,
    pub unemb: Tensor<T>,
}

impl<T: Scalar> LensHead<T> {
    pub fn from_model(model: &Model<T>, site: Site) -> Self {
        LensHead {
            site,
            gain: model.final_norm.clone(),
            unemb: model.unemb.clone(),
        }
    }

    pub fn logits(&self, hidden: &[T]) -> Vec<T> {
        head_logits(hidden, self.gain.data(), self.unemb.data(), self.unemb.rows())
    }
}

/// Hidden rows at every site plus the model's output logits, for a set of sequences.
pub struct Captures<T> {
    pub sites: Vec<Site>,
    /// `hidden[s]` is `rows×d_model` for `sites[s]`.
    pub hidden: Vec<Vec<T>>,
    /// Output logits, `rows×vocab`.
    pub logits: Vec<T>,
    pub tokens: Vec<u32>,
}

struct Capture<T> {
    sites: Vec<Site>,
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardHooks<T> for Capture<T> {
    fn observe(&mut self, site: Site, hidden: &[T], _tokens: &[u32]) {
        if let Some(i) = self.sites.iter().position(|&s| s == site) {
            self.rows[i] = hidden.to_vec();
        }
    }
}

/// Run every sequence through the model, recording each site. Sequences are
/// processed in parallel and concatenated in order.
pub fn capture<T: Scalar>(model: &Model<T>, seqs: &[Vec<u32>]) -> Result<Captures<T>> {
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        bail!(Contract, "devset must contain non-empty sequences");
    }
    let sites = model.sites();
    let parts: Vec<Result<(Vec<Vec<T>>, Vec<T>)>> = par::map_range(seqs.len(), |i| {
        let mut hook = Capture {
            sites: sites.clone(),
            rows: vec![Vec::new(); sites.len()],
        };
        let mut cache = model.new_cache();
        let lg = model.forward_with(&seqs[i], &mut cache, &mut hook)?;
        Ok((hook.rows, lg))
    });
    let mut hidden = vec![Vec::new(); sites.len()];
    let mut logits = Vec::new();
    for p in parts {
        let (rows, lg) = p?;
        for (h, r) in hidden.iter_mut().zip(rows) {
            h.extend(r);
        }
        logits.extend(lg);
    }
    Ok(Captures {
        sites,
        hidden,
        logits,
        tokens: seqs.iter().flatten().copied().collect(),
    })
}

/// Mean `KL(final || lens)` of `head` over rows of `hidden` against `target` logits.
pub fn mean_kl<T: Scalar>(head: &LensHead<T>, hidden: &[T], target: &[T], vocab: usize) -> f64 {
    let d = head.gain.len();
    let rows = hidden.len() / d;
    let chunk = 256;
    let n_chunks = rows.div_ceil(chunk);
    let sums: Vec<f64> = par::map_range(n_chunks, |c| {
        let r = c * chunk..((c + 1) * chunk).min(rows);
        let lg = head.logits(&hidden[r.start * d..r.end * d]);
        (0..r.len())
            .map(|i| {
                let q: Vec<f64> = lg[i * vocab..(i + 1) * vocab].iter().map(|x| x.to_f64().unwrap()).collect();
                let p: Vec<f64> = target[(r.start + i) * vocab..(r.start + i + 1) * vocab].iter().map(|x| x.to_f64().unwrap()).collect();
                kl_logits(&p, &q)
            })
            .sum()
    });
    sums.iter().sum::<f64>() / rows as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LensConfig {
    pub steps: usize,
    pub batch_rows: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Abort when a site's KL exceeds this multiple of its initial value.
    pub divergence_factor: f64,
}

impl Default for LensConfig {
    fn default() -> Self {
        LensConfig {
            steps: 300,
            batch_rows: 512,
            lr: 3e-4,
            weight_decay: 0.01,
            seed: 0,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensSet<T> {
    pub heads: Vec<LensHead<T>>,
    pub init_kl: Vec<f64>,
    pub trained_kl: Vec<f64>,
}

/// Fit one lens head per site. The head at the output site already reproduces
/// the model and is left as initialized.
pub fn train_tuned_lens<T: Scalar>(model: &Model<T>, caps: &Captures<T>, cfg: &LensConfig) -> Result<LensSet<T>> {
    let vocab = model.config.vocab_size;
    let d = model.config.d_model;
    let rows = caps.logits.len() / vocab;
    let last = caps.sites.len() - 1;
    let target_probs: Vec<T> = {
        let mut p = caps.logits.clone();
        for r in p.chunks_mut(vocab) {
            crate::numeric::kernels::softmax_in_place(r);
        }
        p
    };
    let mut heads = Vec::new();
    let mut init_kl = Vec::new();
    let mut trained_kl = Vec::new();
    for (s, &site) in caps.sites.iter().enumerate() {
        let mut head = LensHead::from_model(model, site);
        let hidden = &caps.hidden[s];
        let k0 = mean_kl(&head, hidden, &caps.logits, vocab);
        init_kl.push(k0);
        if s == last {
            trained_kl.push(k0);
            heads.push(head);
            continue;
        }
        let mut opt = OptimizerState::<T>::new(
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
            &[head.gain.len(), head.unemb.len()],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..rows).collect();
        let mut cursor = rows;
        let b = cfg.batch_rows.min(rows).max(1);
        let mut first_loss = None;
        for step in 0..cfg.steps {
            if cursor + b > rows {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = &order[cursor..cursor + b];
            cursor += b;
            let mut x = Vec::with_capacity(b * d);
            let mut y = Vec::with_capacity(b * vocab);
            for &r in batch {
                x.extend_from_slice(&hidden[r * d..(r + 1) * d]);
                y.extend_from_slice(&target_probs[r * vocab..(r + 1) * vocab]);
            }
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(vec![b, d], x)?);
            let gv = g.param(head.gain.clone());
            let uv = g.param(head.unemb.clone());
            let hn = g.rms_norm(xv, gv, NORM_EPS)?;
            let lg = g.matmul_nt(hn, uv)?;
            let loss = g.soft_target_kl(lg, &y)?;
            let lv = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
            let base = *first_loss.get_or_insert(lv.max(1e-12));
            if !lv.is_finite() || lv > cfg.divergence_factor * base.max(k0) {
                bail!(Training, "lens at {} diverged at step {}: KL {} from {}", site, step, lv, base);
            }
            g.backward(loss)?;
            let mut grads = vec![g.take_grad(gv).unwrap(), g.take_grad(uv).unwrap()];
            drop(g);
            let mut params: Vec<&mut [T]> = vec![head.gain.data_mut(), head.unemb.data_mut()];
            adamw_step(&mut params, &mut grads, &mut opt, cfg.lr, 0.0, Some(&[false, true]))?;
        }
        let k1 = mean_kl(&head, hidden, &caps.logits, vocab);
        if !k1.is_finite() || k1 > cfg.divergence_factor * k0.max(1e-12) {
            bail!(Training, "lens at {} diverged: KL {} from {}", site, k1, k0);
        }
        trained_kl.push(k1);
        heads.push(head);
    }
    Ok(LensSet { heads, init_kl, trained_kl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub index: usize,
    pub site: String,
    pub kind: String,
    pub layer: usize,
    pub mean_kl: f64,
}

/// Mean KL per site in forward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlProfile {
    pub entries: Vec<ProfileEntry>,
}

fn site_parts(site: Site) -> (&'static str, usize) {
    match site {
        Site::Block(i) => ("block", i),
        Site::L3(j) => ("l3", j),
    }
}

pub fn lens_kl_profile<T: Scalar>(lens: &LensSet<T>, caps: &Captures<T>) -> Result<KlProfile> {
    if lens.heads.len() != caps.sites.len() {
        bail!(Contract, "{} lens heads for {} sites", lens.heads.len(), caps.sites.len());
    }
    let vocab = lens.heads[0].unemb.rows();
    let mut entries = Vec::new();
    for (i, (h, &site)) in lens.heads.iter().zip(&caps.sites).enumerate() {
        if h.site != site {
            bail!(Contract, "lens head {} belongs to {}, not {}", i, h.site, site);
        }
        let kl = mean_kl(h, &caps.hidden[i], &caps.logits, vocab);
        if kl < -1e-9 {
            bail!(Invariant, "negative KL {} at {}", kl, site);
        }
        let (kind, layer) = site_parts(site);
        entries.push(ProfileEntry {
            index: i,
            site: site.to_string(),
            kind: kind.into(),
            layer,
            mean_kl: kl.max(0.0),
        });
    }
    Ok(KlProfile { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropStats {
    /// KL drop across each L3 layer (value before minus value after).
    pub l3_drops: Vec<f64>,
    /// Median KL drop between consecutive block outputs with no L3 layer in between.
    pub median_block_drop: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn drop_stats(profile: &KlProfile) -> DropStats {
    let e = &profile.entries;
    let mut l3 = Vec::new();
    let mut block = Vec::new();
    for w in e.windows(2) {
        match (w[0].kind.as_str(), w[1].kind.as_str()) {
            (_, "l3") => l3.push(w[0].mean_kl - w[1].mean_kl),
            ("block", "block") => block.push(w[0].mean_kl - w[1].mean_kl),
            _ => {}
        }
    }
    DropStats {
        l3_drops: l3,
        median_block_drop: median(block),
    }
}

/// Per (layer, token) summary of how far L3 scores are from uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub token: u32,
    pub layer: usize,
    pub d_t: usize,
    pub ln_d_t: f64,
    pub mean_kl: f64,
    pub count: u64,
}

struct L3Inputs<T> {
    positions: Vec<usize>,
    rows: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardHooks<T> for L3Inputs<T> {
    fn observe(&mut self, site: Site, hidden: &[T], _tokens: &[u32]) {
        if let Site::Block(i) = site {
            if let Some(j) = self.positions.iter().position(|&p| p == i) {
                self.rows[j] = hidden.to_vec();
            }
        }
    }
}

/// `KL(softmax(K_t x) || Uniform(d_t))` averaged per token and layer over `seqs`.
/// With a residual L3 layer the input is still the block output observed before it.
pub fn access_kl_stats<T: Scalar>(model: &Model<T>, seqs: &[Vec<u32>]) -> Result<Vec<AccessRecord>> {
    if model.l3.is_empty() {
        bail!(Contract, "model has no L3 layers");
    }
    let d = model.config.d_model;
    let parts: Vec<Result<BTreeMap<(usize, u32), (f64, u64)>>> = par::map_range(seqs.len(), |i| {
        let mut hook = L3Inputs {
            positions: model.config.l3_positions.clone(),
            rows: vec![Vec::new(); model.l3.len()],
        };
        let mut cache = model.new_cache();
        model.hidden_with(&seqs[i], &mut cache, &mut hook)?;
        let mut acc = BTreeMap::new();
        for (j, rows) in hook.rows.iter().enumerate() {
            for (r, &t) in seqs[i].iter().enumerate() {
                let p: Vec<f64> = model.l3[j].scores(&rows[r * d..(r + 1) * d], t).iter().map(|x| x.to_f64().unwrap()).collect();
                let e = acc.entry((j, t)).or_insert((0.0, 0));
                e.0 += kl_to_uniform(&p);
                e.1 += 1;
            }
        }
        Ok(acc)
    });
    let mut total: BTreeMap<(usize, u32), (f64, u64)> = BTreeMap::new();
    for p in parts {
        for (k, (s, c)) in p? {
            let e = total.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += c;
        }
    }
    let alloc = model.alloc.as_ref().expect("L3 models carry an allocation");
    let mut out = Vec::with_capacity(total.len());
    for ((layer, token), (s, c)) in total {
        let d_t = alloc.count(token);
        let ln = (d_t as f64).ln();
        let mean = s / c as f64;
        if mean < -1e-9 || mean > ln + 1e-9 {
            bail!(Invariant, "KL {} outside [0, ln {}] for token {} layer {}", mean, d_t, token, layer);
        }
        out.push(AccessRecord {
            token,
            layer,
            d_t,
            ln_d_t: ln,
            mean_kl: mean,
            count: c,
        });
    }
    Ok(out)
}

pub fn write_lens_csv(path: impl AsRef<Path>, profile: &KlProfile, init: Option<&[f64]>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,site,kind,layer,mean_kl,init_kl")?;
    for (i, e) in profile.entries.iter().enumerate() {
        let ik = init.and_then(|v| v.get(i)).map_or(String::new(), |x| format!("{x:.9}"));
        writeln!(w, "{},{},{},{},{:.9},{}", e.index, e.site, e.kind, e.layer, e.mean_kl, ik)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_access_csv(path: impl AsRef<Path>, records: &[AccessRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "token,layer,d_t,ln_d_t,mean_kl,count")?;
    for r in records {
        writeln!(w, "{},{},{},{:.9},{:.9},{}", r.token, r.layer, r.d_t, r.ln_d_t, r.mean_kl, r.count)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::AllocationTable;
    use crate::model::{build_model, ModelConfig, Precision};
    use std::sync::Arc;

    fn model() -> Model<f64> {
        let c = ModelConfig {
            vocab_size: 12,
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            d_ff: 8,
            context_length: 16,
            l3_positions: vec![1],
            l3_d_emb: 8,
            l3_d_up: 6,
            precision: Precision::F64,
            seed: 4,
            ..Default::default()
        };
        let alloc = AllocationTable::from_counts(vec![1, 2, 3, 4, 1, 1, 2, 3, 1, 2, 5, 1], 5).unwrap();
        build_model(&c, Some(Arc::new(alloc))).unwrap()
    }

    fn seqs() -> Vec<Vec<u32>> {
        (0..6).map(|s| (0..10).map(|i| ((i * 5 + s * 3) % 12) as u32).collect()).collect()
    }

    #[test]
    fn uniform_identities() {
        assert_eq!(kl_to_uniform(&[1.0]), 0.0);
        assert!(kl_to_uniform(&[0.25; 4]).abs() < 1e-15);
        let p = [0.7, 0.2, 0.1];
        let direct: f64 = p.iter().map(|&x| x * (x * 3.0f64).ln()).sum();
        assert!((kl_to_uniform(&p) - direct).abs() < 1e-15);
    }

    #[test]
    fn output_site_lens_is_exact_at_init() {
        let m = model();
        let caps = capture(&m, &seqs()).unwrap();
        let last = *caps.sites.last().unwrap();
        let head = LensHead::from_model(&m, last);
        assert_eq!(mean_kl(&head, caps.hidden.last().unwrap(), &caps.logits, 12), 0.0);
    }

    #[test]
    fn lens_training_does_not_increase_kl() {
        let m = model();
        let caps = capture(&m, &seqs()).unwrap();
        let cfg = LensConfig { steps: 60, batch_rows: 30, lr: 1e-2, ..Default::default() };
        let lens = train_tuned_lens(&m, &caps, &cfg).unwrap();
        for (a, b) in lens.init_kl.iter().zip(&lens.trained_kl) {
            assert!(b <= a, "{b} > {a}");
        }
        let prof = lens_kl_profile(&lens, &caps).unwrap();
        assert_eq!(prof.entries.len(), 4);
        assert_eq!(prof.entries.last().unwrap().mean_kl, 0.0);
        let again = train_tuned_lens(&m, &caps, &cfg).unwrap();
        assert_eq!(again, lens);
        let ds = drop_stats(&prof);
        assert_eq!(ds.l3_drops.len(), 1);
    }

    #[test]
    fn access_records_respect_entropy_bound() {
        let m = model();
        let recs = access_kl_stats(&m, &seqs()).unwrap();
        assert!(!recs.is_empty());
        for r in &recs {
            assert!(r.mean_kl >= 0.0 && r.mean_kl <= r.ln_d_t + 1e-12);
            if r.d_t == 1 {
                assert_eq!(r.mean_kl, 0.0);
            }
        }
        let n: u64 = recs.iter().map(|r| r.count).sum();
        assert_eq!(n, 60);
    }
}
