//! Dense vs L3 comparison runs under a shared token budget and matched compute.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, uniform_allocate, AllocationTable, CodewordCounter};
use crate::error::{bail, Result};
use crate::model::{build_model, expected_l3_flops, ModelConfig, Precision};
use crate::numeric::Scalar;
use crate::train::{TrainConfig, Trainer};

/// Largest relative per-token FLOP gap allowed between a variant and the dense baseline.
pub const ISO_FLOP_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocSpec {
    Lzw { v: usize, k: u32 },
    Uniform { per_token: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    /// Empty means the dense baseline.
    #[serde(default)]
    pub l3_positions: Vec<usize>,
    #[serde(default)]
    pub allocation: Option<AllocSpec>,
    #[serde(default)]
    pub tie_kv: bool,
}

impl VariantSpec {
    pub fn dense() -> Self {
        VariantSpec {
            name: "dense".into(),
            l3_positions: Vec::new(),
            allocation: None,
            tie_kv: false,
        }
    }
}

/// The standard comparison set: dense, LZW, uniform at the same `v`, tied LZW,
/// and a single LZW layer after every block of the reduced model.
pub fn standard_variants(vocab: usize, v: usize, k: u32, position: usize, sweep_layers: usize) -> Vec<VariantSpec> {
    let lzw = AllocSpec::Lzw { v, k };
    let one = |name: &str, pos: usize, a: AllocSpec, tie: bool| VariantSpec {
        name: name.into(),
        l3_positions: vec![pos],
        allocation: Some(a),
        tie_kv: tie,
    };
    let mut out = vec![
        VariantSpec::dense(),
        one("l3_lzw", position, lzw.clone(), false),
        one("l3_uniform", position, AllocSpec::Uniform { per_token: (v / vocab).max(1) as u32 }, false),
        one("l3_lzw_tied", position, lzw.clone(), true),
    ];
    for p in 0..sweep_layers {
        out.push(one(&format!("place_{p}"), p, lzw.clone(), false));
    }
    out
}

/// A variant with its compute-matched configuration, before training.
#[derive(Debug, Clone)]
pub struct PlannedVariant {
    pub spec: VariantSpec,
    pub config: ModelConfig,
    pub alloc: Option<Arc<AllocationTable>>,
    pub total_params: usize,
    pub active_params: f64,
    pub flops_per_token: f64,
    pub flop_ratio: f64,
    pub mean_dt: f64,
}

fn mean_dt(alloc: &AllocationTable, stream: &[u32]) -> f64 {
    if stream.is_empty() {
        return 0.0;
    }
    stream.iter().map(|&t| alloc.count(t) as f64).sum::<f64>() / stream.len() as f64
}

fn variant_flops(cfg: &ModelConfig, alloc: Option<&AllocationTable>, stream: &[u32]) -> f64 {
    let l3 = alloc.map_or(0.0, |a| expected_l3_flops(a, stream, cfg.l3_dims()));
    cfg.decoder_flops_per_token() + cfg.l3_positions.len() as f64 * l3
}

/// Resolve every variant against the dense `base`. L3 variants lose decoder
/// blocks until their per-token FLOPs over `stream` come closest to the
/// baseline; a gap above the tolerance is an error.
pub fn plan_matrix(
    base: &ModelConfig,
    variants: &[VariantSpec],
    counter: Option<&CodewordCounter>,
    stream: &[u32],
) -> Result<Vec<PlannedVariant>> {
    if base.has_l3() {
        bail!(Config, "the base configuration must be dense");
    }
    base.validate()?;
    if stream.is_empty() {
        bail!(Config, "FLOP matching needs a non-empty token stream");
    }
    let dense_flops = variant_flops(base, None, stream);
    let mut out = Vec::new();
    for spec in variants {
        if out.iter().any(|p: &PlannedVariant| p.spec.name == spec.name) {
            bail!(Config, "duplicate variant name {}", spec.name);
        }
        let alloc = match (&spec.allocation, spec.l3_positions.is_empty()) {
            (None, true) => None,
            (Some(_), true) => bail!(Config, "variant {} has an allocation but no L3 layers", spec.name),
            (None, false) => bail!(Config, "variant {} has L3 layers but no allocation", spec.name),
            (Some(AllocSpec::Uniform { per_token }), false) => Some(Arc::new(uniform_allocate(base.vocab_size, *per_token)?)),
            (Some(AllocSpec::Lzw { v, k }), false) => {
                let Some(c) = counter else {
                    bail!(Config, "variant {} needs codeword counts for LZW allocation", spec.name);
                };
                Some(Arc::new(allocate(c, *v, *k)?))
            }
        };
        let mut cfg = base.clone();
        cfg.l3_positions = spec.l3_positions.clone();
        cfg.tie_kv = spec.tie_kv;
        if let Some(a) = &alloc {
            let mut best: Option<(f64, usize)> = None;
            let lowest = spec.l3_positions.iter().max().map_or(1, |&p| p + 1);
            for n in lowest..=base.n_layers {
                cfg.n_layers = n;
                let gap = (variant_flops(&cfg, Some(a), stream) / dense_flops - 1.0).abs();
                if best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, n));
                }
            }
            match best {
                Some((gap, n)) if gap <= ISO_FLOP_TOLERANCE => cfg.n_layers = n,
                Some((gap, _)) => bail!(
                    Config,
                    "variant {} cannot be matched to the dense FLOPs: best gap {:.1}%",
                    spec.name,
                    gap * 100.0
                ),
                None => bail!(Config, "variant {} places L3 after block {} of {}", spec.name, lowest - 1, base.n_layers),
            }
        }
        cfg.validate()?;
        let v = alloc.as_ref().map_or(0, |a| a.total());
        let total_params = cfg.total_params(v);
        let mdt = alloc.as_ref().map_or(0.0, |a| mean_dt(a, stream));
        let flops = variant_flops(&cfg, alloc.as_deref(), stream);
        let active = {
            let untouched = if cfg.has_l3() {
                let row = if cfg.tie_kv { cfg.d_model } else { cfg.d_model + cfg.l3_d_emb };
                (v as f64 - mdt) * row as f64 * cfg.l3_positions.len() as f64
            } else {
                0.0
            };
            // Unembedding is used in full; of the token table only one row is read.
            total_params as f64 - untouched - ((cfg.vocab_size - 1) * cfg.d_model) as f64
        };
        out.push(PlannedVariant {
            spec: spec.clone(),
            config: cfg,
            alloc,
            total_params,
            active_params: active,
            flops_per_token: flops,
            flop_ratio: flops / dense_flops,
            mean_dt: mdt,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub name: String,
    pub n_layers: usize,
    pub l3_positions: Vec<usize>,
    pub allocation: Option<AllocSpec>,
    pub tie_kv: bool,
    pub total_params: usize,
    pub active_params: f64,
    pub flops_per_token: f64,
    pub flop_ratio: f64,
    pub mean_dt: f64,
    pub final_train_loss: f64,
    pub final_ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    pub fn row(&self, name: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | layers | L3 after | tied | params | active | FLOPs/tok | vs dense | E[d_t] | ppl |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:?} | {} | {} | {:.0} | {:.3e} | {:.3} | {:.2} | {:.3} |",
                r.name, r.n_layers, r.l3_positions, r.tie_kv, r.total_params, r.active_params, r.flops_per_token, r.flop_ratio, r.mean_dt, r.final_ppl
            );
        }
        s
    }
}

/// Train every planned variant on `train` with the same schedule and seeds and
/// report held-out perplexity on `val`. Per-variant metrics go to
/// `<out_dir>/<name>.jsonl` when a directory is given.
pub fn experiment_matrix(
    planned: &[PlannedVariant],
    train_cfg: &TrainConfig,
    train: &[u32],
    val: &[u32],
    out_dir: Option<&Path>,
) -> Result<MatrixReport> {
    let mut rows = Vec::new();
    for p in planned {
        let (loss, ppl) = match p.config.precision {
            Precision::F32 => run_variant::<f32>(p, train_cfg, train, val, out_dir)?,
            Precision::F64 => run_variant::<f64>(p, train_cfg, train, val, out_dir)?,
        };
        rows.push(MatrixRow {
            name: p.spec.name.clone(),
            n_layers: p.config.n_layers,
            l3_positions: p.config.l3_positions.clone(),
            allocation: p.spec.allocation.clone(),
            tie_kv: p.config.tie_kv,
            total_params: p.total_params,
            active_params: p.active_params,
            flops_per_token: p.flops_per_token,
            flop_ratio: p.flop_ratio,
            mean_dt: p.mean_dt,
            final_train_loss: loss,
            final_ppl: ppl,
        });
    }
    Ok(MatrixReport { rows })
}

fn run_variant<T: Scalar>(
    p: &PlannedVariant,
    train_cfg: &TrainConfig,
    train: &[u32],
    val: &[u32],
    out_dir: Option<&Path>,
) -> Result<(f64, f64)> {
    if val.is_empty() {
        bail!(Config, "held-out stream is empty");
    }
    let model = build_model::<T>(&p.config, p.alloc.clone())?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    let mut file = match out_dir {
        Some(d) => Some(std::io::BufWriter::new(std::fs::File::create(d.join(format!("{}.jsonl", p.spec.name)))?)),
        None => None,
    };
    let ckpt = out_dir.map(|d| d.join(format!("{}.ckpt", p.spec.name)));
    let summary = trainer.run(train, val, ckpt.as_deref(), &mut |rec| {
        if let Some(f) = file.as_mut() {
            serde_json::to_writer(&mut *f, rec)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    })?;
    if let Some(f) = file.as_mut() {
        f.flush()?;
    }
    let ppl = match summary.final_val_ppl {
        Some(p) => p,
        None => trainer.validate(val)?,
    };
    Ok((summary.final_train_loss, ppl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{count_codewords, CountingAlgo};
    use crate::corpus::zipf_lines;

    fn base() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            n_layers: 6,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            d_ff: 48,
            context_length: 16,
            l3_d_emb: 16,
            l3_d_up: 64,
            precision: Precision::F64,
            seed: 2,
            ..Default::default()
        }
    }

    fn data() -> (CodewordCounter, Vec<u32>) {
        let lines = zipf_lines(64, 200, 20, 1.1, 3);
        let c = count_codewords(&lines, 64, CountingAlgo::Appendix).unwrap();
        (c, lines.concat())
    }

    #[test]
    fn plan_matches_flops_by_dropping_blocks() {
        let (c, s) = data();
        let vs = standard_variants(64, 512, 16, 1, 3);
        let plan = plan_matrix(&base(), &vs, Some(&c), &s).unwrap();
        assert_eq!(plan.len(), 7);
        let dense = &plan[0];
        assert_eq!(dense.flop_ratio, 1.0);
        assert_eq!(dense.total_params, base().dense_params());
        for p in &plan[1..] {
            assert!((p.flop_ratio - 1.0).abs() <= ISO_FLOP_TOLERANCE, "{} {}", p.spec.name, p.flop_ratio);
            assert!(p.config.n_layers < 6);
            assert!(p.total_params > dense.total_params);
            assert!(p.active_params < p.total_params as f64);
        }
        let tied = plan.iter().find(|p| p.spec.name == "l3_lzw_tied").unwrap();
        let untied = plan.iter().find(|p| p.spec.name == "l3_lzw").unwrap();
        assert_eq!(untied.total_params - tied.total_params, 512 * 16);
    }

    #[test]
    fn unmatched_compute_is_rejected() {
        let (c, s) = data();
        let mut b = base();
        b.n_layers = 1;
        let vs = vec![VariantSpec::dense(), standard_variants(64, 512, 16, 0, 0)[1].clone()];
        assert!(matches!(plan_matrix(&b, &vs, Some(&c), &s), Err(crate::L3Error::Config(_))));
        let bad = VariantSpec { allocation: None, ..vs[1].clone() };
        assert!(plan_matrix(&base(), &[bad], Some(&c), &s).is_err());
    }

    #[test]
    fn small_matrix_trains_every_variant() {
        let (c, s) = data();
        let (train, val) = s.split_at(3600);
        let vs = standard_variants(64, 512, 16, 1, 0);
        let plan = plan_matrix(&base(), &vs, Some(&c), train).unwrap();
        let tc = TrainConfig {
            batch_tokens: 64,
            total_tokens: 64 * 6,
            warmup_tokens: 64,
            eval_interval: 0,
            eval_tokens: None,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let rep = experiment_matrix(&plan, &tc, train, val, Some(dir.path())).unwrap();
        assert_eq!(rep.rows.len(), 4);
        for r in &rep.rows {
            assert!(r.final_ppl.is_finite() && r.final_ppl > 1.0);
            let lines = std::fs::read_to_string(dir.path().join(format!("{}.jsonl", r.name))).unwrap();
            assert_eq!(lines.lines().count(), 6);
        }
        let dense = rep.row("dense").unwrap();
        assert_eq!(dense.active_params, dense.total_params as f64 - (63 * 16) as f64);
        assert!(rep.to_markdown().contains("l3_lzw_tied"));
    }
}
