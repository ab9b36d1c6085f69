//! Two-tier storage of L3 tables with prefetch during generation.
//!
//! The slow tier is a memory-mapped file holding each layer's key (and value)
//! rows. A single fetch agent thread copies per-token slices into a resident
//! cache, charging a synthetic per-byte latency, while the compute thread runs
//! the blocks that precede the first L3 layer.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use memmap2::Mmap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationTable;
use crate::error::{bail, Result};
use crate::layer::L3Dims;
use crate::model::{ForwardHooks, L3Slices, Model, Site};
use crate::numeric::Scalar;

/// Bytes moved for one token's slices over `layers` layers.
pub fn fetch_volume_bytes(d_t: usize, dims: L3Dims, layers: usize, tied: bool, bytes_per_scalar: usize) -> usize {
    let width = if tied { dims.d_in } else { dims.d_in + dims.d_emb };
    d_t * width * bytes_per_scalar * layers
}

/// Upper bound on [`fetch_volume_bytes`] implied by the allocation cap.
pub fn worst_case_fetch_bytes(alloc: &AllocationTable, dims: L3Dims, layers: usize, tied: bool, bytes_per_scalar: usize) -> usize {
    fetch_volume_bytes(alloc.max_count() as usize, dims, layers, tied, bytes_per_scalar)
}

#[derive(Debug, Clone)]
struct LayerLayout {
    k_offset: usize,
    v_offset: Option<usize>,
    k_row: usize,
    v_row: usize,
}

/// Raw little-endian bytes of one fetched `(K_t, V_t)`; `v` is empty when tied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceBytes {
    pub k: Vec<u8>,
    pub v: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreOptions {
    /// Synthetic transfer cost in nanoseconds per KiB moved.
    pub latency_ns_per_kb: u64,
    /// Charge every token a full `cap`-row slice at a random table offset.
    pub worst_case: bool,
    pub seed: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            latency_ns_per_kb: 0,
            worst_case: false,
            seed: 0,
        }
    }
}

type CacheKey = (usize, u32);

struct Shared {
    mmap: Mmap,
    layers: Vec<LayerLayout>,
    alloc: Arc<AllocationTable>,
    opts: StoreOptions,
    cache: Mutex<HashMap<CacheKey, Arc<Result<SliceBytes>>>>,
    ready: Condvar,
}

struct Request {
    keys: Vec<CacheKey>,
}

/// Slow-tier store plus the fetch agent serving it.
pub struct TierStore {
    shared: Arc<Shared>,
    tx: Option<Sender<Request>>,
    agent: Option<JoinHandle<()>>,
    path: PathBuf,
    scalar_bytes: usize,
}

/// Outstanding request for one step.
#[derive(Debug, Clone)]
pub struct PrefetchHandle {
    pub keys: Vec<CacheKey>,
    pub issued: Instant,
}

fn layouts<T: Scalar>(model: &Model<T>) -> (Vec<LayerLayout>, usize) {
    let mut off = 0;
    let mut out = Vec::new();
    for p in &model.l3 {
        let k_row = p.dims.d_in * T::BYTES;
        let v_row = p.dims.d_emb * T::BYTES;
        let v = p.alloc.total();
        let k_offset = off;
        off += v * k_row;
        let v_offset = if p.tied() {
            None
        } else {
            let o = off;
            off += v * v_row;
            Some(o)
        };
        out.push(LayerLayout {
            k_offset,
            v_offset,
            k_row,
            v_row,
        });
    }
    (out, off)
}

impl TierStore {
    /// Write `model`'s L3 tables to `path` and map them.
    pub fn create<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>, opts: StoreOptions) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        for p in &model.l3 {
            for &x in p.wk.data() {
                x.write_le(&mut bytes);
            }
            if let Some(wv) = &p.wv {
                for &x in wv.data() {
                    x.write_le(&mut bytes);
                }
            }
        }
        fs::write(path, &bytes)?;
        Self::open(model, path, opts)
    }

    /// Map an existing slow-tier file laid out for `model`.
    pub fn open<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>, opts: StoreOptions) -> Result<Self> {
        let path = path.as_ref();
        let Some(alloc) = model.alloc.clone() else {
            bail!(Config, "model has no L3 layers to offload");
        };
        let (layers, size) = layouts(model);
        let file = File::open(path)?;
        let len = file.metadata()?.len() as usize;
        if len != size {
            bail!(Format, "slow-tier file is {} bytes, layout needs {}", len, size);
        }
        // SAFETY: the file is private to this store and not resized while mapped.
        let mmap = unsafe { Mmap::map(&file)? };
        let shared = Arc::new(Shared {
            mmap,
            layers,
            alloc,
            opts,
            cache: Mutex::new(HashMap::new()),
            ready: Condvar::new(),
        });
        let (tx, rx) = mpsc::channel::<Request>();
        let agent_shared = shared.clone();
        let agent = std::thread::Builder::new()
            .name("l3-fetch".into())
            .spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(agent_shared.opts.seed);
                while let Ok(req) = rx.recv() {
                    for key in req.keys {
                        let res = agent_shared.fetch(key, &mut rng);
                        agent_shared.cache.lock().unwrap().insert(key, Arc::new(res));
                        agent_shared.ready.notify_all();
                    }
                }
            })?;
        Ok(TierStore {
            shared,
            tx: Some(tx),
            agent: Some(agent),
            path: path.to_path_buf(),
            scalar_bytes: T::BYTES,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn num_layers(&self) -> usize {
        self.shared.layers.len()
    }

    pub fn options(&self) -> StoreOptions {
        self.shared.opts
    }

    pub fn scalar_bytes(&self) -> usize {
        self.scalar_bytes
    }

    /// Backing bytes of token `t`'s slice in `layer`, read directly from the map.
    pub fn backing_slice(&self, layer: usize, token: u32) -> Result<SliceBytes> {
        self.shared.slice(layer, token)
    }

    /// Queue the slices of `tokens` for `layers`; returns immediately.
    pub fn prefetch(&self, tokens: &[u32], layers: &[usize]) -> Result<PrefetchHandle> {
        let mut seen = HashSet::new();
        let mut keys = Vec::new();
        for &l in layers {
            for &t in tokens {
                if t as usize >= self.shared.alloc.vocab_size() {
                    bail!(Index, "token {} out of range", t);
                }
                if seen.insert((l, t)) {
                    keys.push((l, t));
                }
            }
        }
        let issued = Instant::now();
        let tx = self.tx.as_ref().expect("agent alive while the store exists");
        tx.send(Request { keys: keys.clone() })
            .map_err(|_| crate::L3Error::Fetch("fetch agent stopped".into()))?;
        Ok(PrefetchHandle { keys, issued })
    }

    /// Block until `(layer, token)` is resident. Returns the bytes and the time spent blocked.
    pub fn await_slice(&self, layer: usize, token: u32) -> Result<(Arc<Result<SliceBytes>>, Duration)> {
        let mut cache = self.shared.cache.lock().unwrap();
        let mut waited = Duration::ZERO;
        loop {
            if let Some(e) = cache.get(&(layer, token)) {
                return Ok((e.clone(), waited));
            }
            let t = Instant::now();
            cache = self.shared.ready.wait(cache).unwrap();
            waited += t.elapsed();
        }
    }

    pub fn is_resident(&self, layer: usize, token: u32) -> bool {
        self.shared.cache.lock().unwrap().contains_key(&(layer, token))
    }

    /// Drop the cache entries of a handle whose step has completed.
    pub fn evict(&self, handle: &PrefetchHandle) {
        let mut cache = self.shared.cache.lock().unwrap();
        for k in &handle.keys {
            cache.remove(k);
        }
    }

    pub fn cached_entries(&self) -> usize {
        self.shared.cache.lock().unwrap().len()
    }
}

impl Drop for TierStore {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(a) = self.agent.take() {
            let _ = a.join();
        }
    }
}

impl Shared {
    fn slice(&self, layer: usize, token: u32) -> Result<SliceBytes> {
        let Some(lay) = self.layers.get(layer) else {
            bail!(Fetch, "no L3 layer {} in the slow tier", layer);
        };
        if token as usize >= self.alloc.vocab_size() {
            bail!(Fetch, "token {} out of range", token);
        }
        let r = self.alloc.range(token);
        let k = self.mmap[lay.k_offset + r.start * lay.k_row..lay.k_offset + r.end * lay.k_row].to_vec();
        let v = match lay.v_offset {
            Some(o) => self.mmap[o + r.start * lay.v_row..o + r.end * lay.v_row].to_vec(),
            None => Vec::new(),
        };
        Ok(SliceBytes { k, v })
    }

    fn fetch(&self, (layer, token): CacheKey, rng: &mut ChaCha8Rng) -> Result<SliceBytes> {
        let out = self.slice(layer, token)?;
        let lay = &self.layers[layer];
        let mut charged = out.k.len() + out.v.len();
        if self.opts.worst_case {
            let rows = self.alloc.cap().min(self.alloc.total() as u32) as usize;
            let start = rng.gen_range(0..=self.alloc.total() - rows);
            let k = &self.mmap[lay.k_offset + start * lay.k_row..lay.k_offset + (start + rows) * lay.k_row];
            let mut scratch = k.to_vec();
            if let Some(o) = lay.v_offset {
                scratch.extend_from_slice(&self.mmap[o + start * lay.v_row..o + (start + rows) * lay.v_row]);
            }
            charged = std::hint::black_box(scratch).len();
        }
        let ns = charged as u64 * self.opts.latency_ns_per_kb / 1024;
        if ns > 0 {
            std::thread::sleep(Duration::from_nanos(ns));
        }
        Ok(out)
    }
}

/// Where L3 parameters live during generation.
#[derive(Clone, Copy)]
pub enum Residency<'a> {
    Resident,
    /// Fetch from the slow tier; `strict` awaits every layer before the first L3 layer.
    Offloaded { store: &'a TierStore, strict: bool },
}

/// Timing of one decode step; nanoseconds are relative to the start of generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    /// Input tokens processed by the step (the whole prompt on step 0).
    pub inputs: usize,
    pub start_ns: u64,
    pub issue_ns: Option<u64>,
    pub first_block_start_ns: u64,
    pub block_starts_ns: Vec<u64>,
    /// Issue-to-resident time per L3 layer, observed at await.
    pub fetch_ns: Vec<u64>,
    pub stall_ns: u64,
    pub end_ns: u64,
    /// Each L3 layer awaited residency before use.
    pub awaited: Vec<bool>,
}

impl StepTiming {
    pub fn latency_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mode: String,
    pub strict: bool,
    pub latency_ns_per_kb: u64,
    pub l3_positions: Vec<usize>,
    pub steps: Vec<StepTiming>,
    pub total_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub timing: TimingReport,
}

struct OffloadHooks<'a, T> {
    store: &'a TierStore,
    strict: bool,
    handle: PrefetchHandle,
    block_starts: Vec<Instant>,
    stall: Duration,
    fetch_ns: Vec<u64>,
    awaited: Vec<bool>,
    strict_done: bool,
    _p: std::marker::PhantomData<T>,
}

impl<T: Scalar> ForwardHooks<T> for OffloadHooks<'_, T> {
    fn before_block(&mut self, _layer: usize) -> Result<()> {
        self.block_starts.push(Instant::now());
        Ok(())
    }

    fn l3_slices(&mut self, l3: usize, token: u32) -> Result<Option<L3Slices<T>>> {
        if self.strict && !self.strict_done {
            for &(l, t) in &self.handle.keys.clone() {
                let (_, w) = self.store.await_slice(l, t)?;
                self.stall += w;
            }
            self.strict_done = true;
        }
        let (entry, waited) = self.store.await_slice(l3, token)?;
        self.stall += waited;
        self.awaited[l3] = true;
        let done = self.handle.issued.elapsed().as_nanos() as u64;
        self.fetch_ns[l3] = self.fetch_ns[l3].max(if waited.is_zero() { 0 } else { done });
        let bytes = match entry.as_ref() {
            Ok(b) => b,
            Err(e) => bail!(Fetch, "prefetch of layer {} token {} failed: {}", l3, token, e),
        };
        let k: Vec<T> = bytes.k.chunks_exact(T::BYTES).map(T::read_le).collect();
        let v: Vec<T> = if bytes.v.is_empty() {
            k.clone()
        } else {
            bytes.v.chunks_exact(T::BYTES).map(T::read_le).collect()
        };
        Ok(Some((k, v)))
    }

    fn observe(&mut self, _site: Site, _hidden: &[T], _tokens: &[u32]) {}
}

struct TimingHooks {
    block_starts: Vec<Instant>,
}

impl<T: Scalar> ForwardHooks<T> for TimingHooks {
    fn before_block(&mut self, _layer: usize) -> Result<()> {
        self.block_starts.push(Instant::now());
        Ok(())
    }
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

fn ns_since(t0: Instant, t: Instant) -> u64 {
    t.duration_since(t0).as_nanos() as u64
}

/// Greedy decoding with a KV cache. In offloaded mode each step's slices are
/// requested before its first block runs and each L3 layer blocks until its
/// slice is resident.
pub fn generate<T: Scalar>(model: &Model<T>, prompt: &[u32], n_new: usize, residency: Residency<'_>) -> Result<Generation> {
    if prompt.is_empty() {
        bail!(Contract, "prompt must not be empty");
    }
    let ctx = model.config.context_length;
    if prompt.len() + n_new.saturating_sub(1) > ctx {
        bail!(Contract, "prompt {} + {} new tokens exceed context {}", prompt.len(), n_new, ctx);
    }
    if let Residency::Offloaded { store, .. } = residency {
        if store.num_layers() != model.l3.len() || store.scalar_bytes() != T::BYTES {
            bail!(Contract, "slow tier does not match the model");
        }
    }
    let layers: Vec<usize> = (0..model.l3.len()).collect();
    let mut cache = model.new_cache();
    let mut input = prompt.to_vec();
    let mut out = Vec::with_capacity(n_new);
    let mut steps = Vec::with_capacity(n_new);
    let t0 = Instant::now();
    for step in 0..n_new {
        let start = Instant::now();
        let (logits, timing) = match residency {
            Residency::Resident => {
                let mut h = TimingHooks { block_starts: Vec::new() };
                let lg = model.forward_with(&input, &mut cache, &mut h)?;
                (lg, (None, h.block_starts, Duration::ZERO, vec![0; layers.len()], vec![false; layers.len()]))
            }
            Residency::Offloaded { store, strict } => {
                let handle = store.prefetch(&input, &layers)?;
                let mut h = OffloadHooks::<T> {
                    store,
                    strict,
                    handle,
                    block_starts: Vec::new(),
                    stall: Duration::ZERO,
                    fetch_ns: vec![0; layers.len()],
                    awaited: vec![false; layers.len()],
                    strict_done: false,
                    _p: std::marker::PhantomData,
                };
                let res = model.forward_with(&input, &mut cache, &mut h);
                // drain anything still in flight so the cache holds no stale entries
                for &(l, t) in &h.handle.keys {
                    store.await_slice(l, t)?;
                }
                store.evict(&h.handle);
                let lg = res?;
                (lg, (Some(h.handle.issued), h.block_starts, h.stall, h.fetch_ns, h.awaited))
            }
        };
        let v = model.config.vocab_size;
        let next = argmax(&logits[logits.len() - v..]);
        let end = Instant::now();
        let (issued, blocks, stall, fetch_ns, awaited) = timing;
        let block_starts_ns: Vec<u64> = blocks.iter().map(|&b| ns_since(t0, b)).collect();
        steps.push(StepTiming {
            step,
            inputs: input.len(),
            start_ns: ns_since(t0, start),
            issue_ns: issued.map(|i| ns_since(t0, i)),
            first_block_start_ns: block_starts_ns.first().copied().unwrap_or_else(|| ns_since(t0, start)),
            block_starts_ns,
            fetch_ns,
            stall_ns: stall.as_nanos() as u64,
            end_ns: ns_since(t0, end),
            awaited,
        });
        out.push(next);
        input = vec![next];
    }
    let (mode, strict, lat) = match residency {
        Residency::Resident => ("resident", false, 0),
        Residency::Offloaded { store, strict } => ("offloaded", strict, store.options().latency_ns_per_kb),
    };
    Ok(Generation {
        tokens: out,
        timing: TimingReport {
            mode: mode.into(),
            strict,
            latency_ns_per_kb: lat,
            l3_positions: model.config.l3_positions.clone(),
            steps,
            total_ns: t0.elapsed().as_nanos() as u64,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub steps: usize,
    pub zero_stall_fraction: f64,
    pub mean_stall_ns: f64,
    pub p50_stall_ns: u64,
    pub p90_stall_ns: u64,
    pub max_stall_ns: u64,
    pub total_stall_ns: u64,
    pub mean_step_ns: f64,
    /// Mean step latency relative to the baseline, in percent.
    pub overhead_pct: Option<f64>,
    /// Every offloaded step issued its prefetch before its first block started.
    pub issue_before_first_block: bool,
    /// Every L3 execution awaited residency.
    pub all_awaited: bool,
}

/// Summary of a report, optionally against a resident baseline. Step 0 (prompt
/// processing) is excluded so the figures describe steady-state decoding.
pub fn overlap_report(report: &TimingReport, baseline: Option<&TimingReport>) -> Result<OverlapSummary> {
    let steps: Vec<&StepTiming> = report.steps.iter().skip(usize::from(report.steps.len() > 1)).collect();
    if steps.is_empty() {
        bail!(Contract, "overlap report needs at least one generated token");
    }
    let mut stalls: Vec<u64> = steps.iter().map(|s| s.stall_ns).collect();
    stalls.sort_unstable();
    let n = stalls.len();
    let pick = |q: f64| stalls[((n - 1) as f64 * q).round() as usize];
    let mean_step = steps.iter().map(|s| s.latency_ns() as f64).sum::<f64>() / n as f64;
    let overhead_pct = match baseline {
        Some(b) => {
            let bs: Vec<&StepTiming> = b.steps.iter().skip(usize::from(b.steps.len() > 1)).collect();
            if bs.is_empty() {
                None
            } else {
                let bm = bs.iter().map(|s| s.latency_ns() as f64).sum::<f64>() / bs.len() as f64;
                Some(100.0 * (mean_step - bm) / bm)
            }
        }
        None => None,
    };
    let offloaded = report.mode == "offloaded";
    Ok(OverlapSummary {
        steps: n,
        zero_stall_fraction: stalls.iter().filter(|&&s| s == 0).count() as f64 / n as f64,
        mean_stall_ns: stalls.iter().sum::<u64>() as f64 / n as f64,
        p50_stall_ns: pick(0.5),
        p90_stall_ns: pick(0.9),
        max_stall_ns: stalls[n - 1],
        total_stall_ns: stalls.iter().sum(),
        mean_step_ns: mean_step,
        overhead_pct,
        issue_before_first_block: report.steps.iter().all(|s| s.issue_ns.map_or(!offloaded, |i| i <= s.first_block_start_ns)),
        all_awaited: !offloaded || report.steps.iter().all(|s| s.awaited.iter().all(|&a| a)),
    })
}

/// Median compute time of one decoder block during single-token decoding,
/// measured on a resident copy of the model without its L3 layers.
pub fn measure_block_ns<T: Scalar>(model: &Model<T>, prompt: &[u32], n_new: usize) -> Result<f64> {
    let mut dense = model.clone();
    dense.l3.clear();
    dense.config.l3_positions.clear();
    let g = generate(&dense, prompt, n_new, Residency::Resident)?;
    let mut d: Vec<u64> = Vec::new();
    for st in g.timing.steps.iter().skip(1) {
        d.extend(st.block_starts_ns.windows(2).map(|w| w[1] - w[0]));
    }
    if d.is_empty() {
        bail!(Contract, "need at least two decode steps and two blocks to time a block");
    }
    d.sort_unstable();
    Ok(d[d.len() / 2] as f64)
}

/// Settings of a first-L3-depth sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Number of blocks before the single L3 layer, one model per entry.
    pub depths: Vec<usize>,
    /// Synthetic fetch time of one token's worst-case slice, in units of block compute.
    pub fetch_blocks: f64,
    pub prompts: usize,
    pub prompt_len: usize,
    pub n_new: usize,
    pub strict: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: vec![1, 2, 3, 4],
            fetch_blocks: 2.0,
            prompts: 50,
            prompt_len: 4,
            n_new: 16,
            strict: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub first_l3_layer: usize,
    pub mean_stall_ns: f64,
    pub zero_stall_fraction: f64,
    pub mean_step_ns: f64,
    pub resident_mean_step_ns: f64,
    pub overhead_pct: f64,
    pub identical_tokens: bool,
    pub contracts_held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub block_ns: f64,
    pub fetch_bytes: usize,
    pub latency_ns_per_kb: u64,
    pub points: Vec<SweepPoint>,
}

/// Decode the same random prompts with one L3 layer placed after each depth in
/// `cfg.depths`, resident and offloaded, on a worst-case store whose per-token
/// fetch costs `cfg.fetch_blocks` blocks of compute.
pub fn masking_sweep<T: Scalar>(
    base: &crate::model::ModelConfig,
    alloc: Arc<AllocationTable>,
    cfg: &SweepConfig,
    dir: &Path,
) -> Result<SweepResult> {
    if cfg.depths.iter().any(|&d| d == 0 || d > base.n_layers) {
        bail!(Config, "depths must lie in 1..={}", base.n_layers);
    }
    let build = |depth: usize| -> Result<Model<T>> {
        let mut c = base.clone();
        c.l3_positions = vec![depth - 1];
        c.precision = T::NAME.parse()?;
        crate::model::build_model(&c, Some(alloc.clone()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompts: Vec<Vec<u32>> = (0..cfg.prompts)
        .map(|_| (0..cfg.prompt_len).map(|_| rng.gen_range(0..base.vocab_size as u32)).collect())
        .collect();
    let probe = build(cfg.depths[0])?;
    let mut block_ns = Vec::new();
    for p in prompts.iter().take(3) {
        block_ns.push(measure_block_ns(&probe, p, cfg.n_new.max(3))?);
    }
    block_ns.sort_by(f64::total_cmp);
    let block_ns = block_ns[block_ns.len() / 2];
    let rows = alloc.cap().min(alloc.total() as u32) as usize;
    let fetch_bytes = fetch_volume_bytes(rows, base.l3_dims(), 1, base.tie_kv, T::BYTES);
    let latency_ns_per_kb = (cfg.fetch_blocks * block_ns * 1024.0 / fetch_bytes as f64).round() as u64;
    let mut points = Vec::new();
    for &depth in &cfg.depths {
        let model = build(depth)?;
        let opts = StoreOptions { latency_ns_per_kb, worst_case: true, seed: cfg.seed };
        let store = TierStore::create(&model, dir.join(format!("tier_depth{depth}.bin")), opts)?;
        let (mut stall, mut zero, mut steps, mut step_ns, mut res_ns) = (0.0, 0.0, 0usize, 0.0, 0.0);
        let mut identical = true;
        let mut held = true;
        for p in &prompts {
            let r = generate(&model, p, cfg.n_new, Residency::Resident)?;
            let o = generate(&model, p, cfg.n_new, Residency::Offloaded { store: &store, strict: cfg.strict })?;
            identical &= r.tokens == o.tokens;
            let s = overlap_report(&o.timing, Some(&r.timing))?;
            let rs = overlap_report(&r.timing, None)?;
            held &= s.all_awaited && s.issue_before_first_block;
            stall += s.total_stall_ns as f64;
            zero += s.zero_stall_fraction * s.steps as f64;
            steps += s.steps;
            step_ns += s.mean_step_ns * s.steps as f64;
            res_ns += rs.mean_step_ns * rs.steps as f64;
        }
        let n = steps.max(1) as f64;
        points.push(SweepPoint {
            first_l3_layer: depth,
            mean_stall_ns: stall / n,
            zero_stall_fraction: zero / n,
            mean_step_ns: step_ns / n,
            resident_mean_step_ns: res_ns / n,
            overhead_pct: 100.0 * (step_ns - res_ns) / res_ns,
            identical_tokens: identical,
            contracts_held: held,
        });
        drop(store);
        let _ = fs::remove_file(dir.join(format!("tier_depth{depth}.bin")));
    }
    Ok(SweepResult {
        block_ns,
        fetch_bytes,
        latency_ns_per_kb,
        points,
    })
}
