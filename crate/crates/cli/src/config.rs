//! Run configuration: built-in defaults, then `L3_SEED`, then a TOML or JSON
//! file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use l3_core::allocation::CountingAlgo;
use l3_core::analysis::LensConfig;
use l3_core::corpus::SynthConfig;
use l3_core::experiment::VariantSpec;
use l3_core::model::ModelConfig;
use l3_core::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "L3_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `.txt` documents.
    pub corpus: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    /// Fraction of tokens, taken from the end in file order, held out for validation.
    pub val_fraction: f64,
    /// Held-out windows used for lens fitting.
    pub devset_seqs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            tokenizer: None,
            val_fraction: 0.02,
            devset_seqs: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocMode {
    Lzw,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocConfig {
    pub mode: AllocMode,
    /// Total embeddings; defaults to eight per vocabulary entry.
    pub v: Option<usize>,
    pub k: u32,
    pub per_token: u32,
    pub algo: CountingAlgo,
}

impl Default for AllocConfig {
    fn default() -> Self {
        AllocConfig {
            mode: AllocMode::Lzw,
            v: None,
            k: 64,
            per_token: 8,
            algo: CountingAlgo::Appendix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub prompts: usize,
    pub prompt_len: usize,
    pub n_new: usize,
    pub strict: bool,
    pub worst_case: bool,
    /// Fixed synthetic latency; when absent it is calibrated from `fetch_blocks`.
    pub latency_ns_per_kb: Option<u64>,
    pub fetch_blocks: f64,
    pub depths: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prompts: 50,
            prompt_len: 4,
            n_new: 16,
            strict: false,
            worst_case: true,
            latency_ns_per_kb: None,
            fetch_blocks: 2.0,
            depths: vec![1, 2, 3, 4],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    /// Explicit variant list; the standard set is used when empty.
    pub variants: Vec<VariantSpec>,
    /// Block after which the single L3 layer of the standard variants runs.
    pub position: usize,
    /// Placement variants, one per block index below this.
    pub sweep_layers: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            variants: Vec::new(),
            position: 1,
            sweep_layers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub alloc: AllocConfig,
    pub lens: LensConfig,
    pub bench: BenchConfig,
    pub matrix: MatrixConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            alloc: AllocConfig::default(),
            lens: LensConfig::default(),
            bench: BenchConfig::default(),
            matrix: MatrixConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Every seed in the configuration.
pub const SEED_PATHS: &[&str] = &["model.seed", "train.seed", "lens.seed", "bench.seed", "synth.seed"];

impl RunConfig {
    pub fn total_v(&self) -> usize {
        self.alloc.v.unwrap_or(8 * self.model.vocab_size)
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| anyhow!("config key {path:?} does not name a field"))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*p) {
                bail!("unknown config key {path:?}");
            }
            obj.insert(p.to_string(), v);
            return Ok(());
        }
        cur = obj.get_mut(*p).ok_or_else(|| anyhow!("unknown config key {path:?}"))?;
    }
    unreachable!()
}

/// Parse a `--set` value: JSON when it parses, otherwise a string.
pub fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => {
            let t: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            serde_json::to_value(t)?
        }
    };
    if !v.is_object() {
        bail!("config {} must be a table", path.display());
    }
    Ok(v)
}

/// Resolve the configuration. `overrides` are dotted paths applied last, in order.
pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    if let Some(s) = env_seed {
        let seed: u64 = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
        for p in SEED_PATHS {
            set_path(&mut v, p, seed.into())?;
        }
    }
    if let Some(f) = file {
        merge(&mut v, read_file(f)?);
    }
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(v).context("config does not match the schema")?;
    if cfg.schema_version != SCHEMA_VERSION {
        bail!("config schema version {} is not supported (expected {})", cfg.schema_version, SCHEMA_VERSION);
    }
    if !(0.0..1.0).contains(&cfg.data.val_fraction) {
        bail!("data.val_fraction must lie in [0, 1)");
    }
    cfg.model.validate()?;
    cfg.train.validate(cfg.model.context_length)?;
    Ok(cfg)
}
