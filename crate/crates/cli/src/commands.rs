use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use l3_core::allocation::{allocate, allocation_stats, count_codewords, uniform_allocate, AllocationTable};
use l3_core::analysis::{access_kl_stats, capture, drop_stats, lens_kl_profile, train_tuned_lens, write_access_csv, write_lens_csv};
use l3_core::checkpoint::{checkpoint_precision, Checkpoint};
use l3_core::corpus::{read_documents, write_synthetic_corpus, TokenizedCorpus};
use l3_core::experiment::{experiment_matrix, plan_matrix, standard_variants};
use l3_core::layer::{l3_flops, L3Dims};
use l3_core::model::{build_model, eval_perplexity, Model, Precision};
use l3_core::numeric::Scalar;
use l3_core::offload::{generate, masking_sweep, measure_block_ns, overlap_report, Residency, StoreOptions, SweepConfig, TierStore};
use l3_core::tokenizer::Tokenizer;
use l3_core::train::Trainer;
use l3_core::L3Error;

use crate::config::{self, AllocMode, RunConfig, SEED_ENV, SEED_PATHS};
use crate::manifest::Recorder;
use crate::{Command, Common, DataArgs};

/// A problem with how the tool was invoked rather than with the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let config_error = e.chain().any(|c| matches!(c.downcast_ref::<L3Error>(), Some(L3Error::Config(_))));
    if e.is::<UsageError>() || config_error {
        2
    } else {
        1
    }
}

struct Ctx {
    cfg: RunConfig,
    force: bool,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.model.seed
    }

    fn config_value(&self) -> Value {
        serde_json::to_value(&self.cfg).unwrap_or(Value::Null)
    }

    /// Refuse to clobber an existing file or non-empty directory without `--force`.
    fn claim(&self, path: &Path, dir: bool) -> Result<()> {
        let taken = if path.is_dir() { fs::read_dir(path)?.next().is_some() } else { path.exists() };
        if taken && !self.force {
            return Err(usage(format!("{} already exists; pass --force to replace it", path.display())));
        }
        if dir {
            fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        } else if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(p)?;
        }
        Ok(())
    }
}

fn setup(common: &Common, mut overrides: Vec<(String, Value)>) -> Result<Ctx> {
    let mut all = Vec::new();
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        all.push((k.trim().to_string(), config::parse_value(v.trim())));
    }
    all.append(&mut overrides);
    if let Some(seed) = common.seed {
        for p in SEED_PATHS {
            all.push((p.to_string(), seed.into()));
        }
    }
    if let Some(c) = &common.config {
        require(c)?;
    }
    let env = std::env::var(SEED_ENV).ok();
    let cfg = config::resolve(common.config.as_deref(), env.as_deref(), &all).map_err(|e| usage(format!("{e:#}")))?;
    Ok(Ctx { cfg, force: common.force })
}

fn require(p: &Path) -> Result<()> {
    if !p.exists() {
        return Err(usage(format!("input {} does not exist", p.display())));
    }
    Ok(())
}

fn opt<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.into(), serde_json::to_value(v).expect("plain value")));
    }
}

fn data_overrides(d: &DataArgs) -> Vec<(String, Value)> {
    let mut o = Vec::new();
    opt(&mut o, "data.corpus", &d.corpus);
    opt(&mut o, "data.tokenizer", &d.tokenizer);
    o
}

fn corpus_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let p = cfg.data.corpus.clone().ok_or_else(|| usage("no corpus given (--corpus or data.corpus)"))?;
    require(&p)?;
    Ok(p)
}

fn tokenizer_path(cfg: &RunConfig) -> Result<PathBuf> {
    let p = cfg.data.tokenizer.clone().ok_or_else(|| usage("no tokenizer given (--tokenizer or data.tokenizer)"))?;
    require(&p)?;
    Ok(p)
}

struct Data {
    tok: Tokenizer,
    train: TokenizedCorpus,
    val: TokenizedCorpus,
}

fn load_data(cfg: &RunConfig, rec: &mut Recorder) -> Result<Data> {
    let dir = corpus_dir(cfg)?;
    let tp = tokenizer_path(cfg)?;
    rec.input(&dir)?;
    rec.input(&tp)?;
    let tok = Tokenizer::load(&tp)?;
    let docs = read_documents(&dir)?;
    let all = TokenizedCorpus::encode(&tok, &docs);
    let (train, val) = all.split(cfg.data.val_fraction);
    Ok(Data { tok, train, val })
}

/// Print a line, treating a closed pipe as success.
fn stdout(s: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthCorpus { common, files, bytes_per_file, output } => {
            let mut o = Vec::new();
            opt(&mut o, "synth.files", &files);
            opt(&mut o, "synth.bytes_per_file", &bytes_per_file);
            let ctx = setup(&common, o)?;
            synth_corpus(&ctx, &output)
        }
        Command::TokenizeTrain { common, corpus, vocab, output } => {
            let mut o = Vec::new();
            opt(&mut o, "data.corpus", &corpus);
            opt(&mut o, "model.vocab_size", &vocab);
            let ctx = setup(&common, o)?;
            tokenize_train(&ctx, &output)
        }
        Command::Alloc { common, data, uniform, v, k, algo, vocab, output } => {
            let mut o = data_overrides(&data);
            if let Some(n) = uniform {
                o.push(("alloc.mode".into(), json!("uniform")));
                o.push(("alloc.per_token".into(), n.into()));
            }
            opt(&mut o, "alloc.v", &v);
            opt(&mut o, "alloc.k", &k);
            opt(&mut o, "alloc.algo", &algo);
            opt(&mut o, "model.vocab_size", &vocab);
            let ctx = setup(&common, o)?;
            alloc(&ctx, &output)
        }
        Command::Stats { common, alloc, output } => {
            let ctx = setup(&common, Vec::new())?;
            stats(&ctx, &alloc, output.as_deref())
        }
        Command::Train { common, data, alloc, precision, total_tokens, resume, output } => {
            let mut o = data_overrides(&data);
            opt(&mut o, "model.allocation", &alloc.map(|p| p.display().to_string()));
            opt(&mut o, "model.precision", &precision.map(|p| p.to_lowercase()));
            opt(&mut o, "train.total_tokens", &total_tokens);
            let ctx = setup(&common, o)?;
            train(&ctx, resume.as_deref(), &output)
        }
        Command::Eval { common, data, checkpoint, split, max_tokens, output } => {
            let ctx = setup(&common, data_overrides(&data))?;
            eval(&ctx, &checkpoint, &split, max_tokens, output.as_deref())
        }
        Command::Bench { common, checkpoint, sweep, alloc, prompts, n_new, latency_ns_per_kb, strict, output } => {
            let mut o = Vec::new();
            opt(&mut o, "model.allocation", &alloc.map(|p| p.display().to_string()));
            opt(&mut o, "bench.prompts", &prompts);
            opt(&mut o, "bench.n_new", &n_new);
            opt(&mut o, "bench.latency_ns_per_kb", &latency_ns_per_kb);
            if strict {
                o.push(("bench.strict".into(), true.into()));
            }
            let ctx = setup(&common, o)?;
            if sweep {
                bench_sweep(&ctx, &output)
            } else {
                let ck = checkpoint.ok_or_else(|| usage("bench needs --checkpoint unless --sweep is given"))?;
                bench(&ctx, &ck, &output)
            }
        }
        Command::Lens { common, data, checkpoint, steps, output } => {
            let mut o = data_overrides(&data);
            opt(&mut o, "lens.steps", &steps);
            let ctx = setup(&common, o)?;
            lens(&ctx, &checkpoint, &output)
        }
        Command::Flops { d_t, d_in, d_emb, d_up, d_out } => {
            let dims = L3Dims { d_in, d_emb, d_up, d_out: d_out.unwrap_or(d_in) };
            let r = l3_flops(d_t, dims);
            stdout(&serde_json::to_string_pretty(&json!({
                "dims": dims,
                "d_t": d_t,
                "flops": r,
                "mixing_discrepancy": r.mixing_discrepancy(),
            }))?)?;
            Ok(())
        }
        Command::Matrix { common, data, plan_only, output } => {
            let ctx = setup(&common, data_overrides(&data))?;
            matrix(&ctx, plan_only, &output)
        }
    }
}

fn synth_corpus(ctx: &Ctx, out: &Path) -> Result<()> {
    ctx.claim(out, true)?;
    let mut rec = Recorder::new("synth-corpus");
    for f in write_synthetic_corpus(out, ctx.cfg.synth)? {
        rec.output(f);
    }
    rec.finish(&out.join("manifest.json"), ctx.cfg.synth.seed, ctx.config_value())
}

fn tokenize_train(ctx: &Ctx, out: &Path) -> Result<()> {
    let dir = corpus_dir(&ctx.cfg)?;
    ctx.claim(out, false)?;
    let mut rec = Recorder::new("tokenize-train");
    rec.input(&dir)?;
    let bytes: Vec<u8> = read_documents(&dir)?.concat();
    let tok = Tokenizer::train(&bytes, ctx.cfg.model.vocab_size)?;
    tok.save(out)?;
    rec.output(out);
    eprintln!("tokenizer: {} tokens, {} merges", tok.vocab_size(), tok.merges().len());
    rec.finish(&sidecar(out), ctx.seed(), ctx.config_value())
}

fn alloc(ctx: &Ctx, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut rec = Recorder::new("alloc");
    let table = match cfg.alloc.mode {
        AllocMode::Uniform => {
            let vocab = match &cfg.data.tokenizer {
                Some(p) => {
                    require(p)?;
                    rec.input(p)?;
                    Tokenizer::load(p)?.vocab_size()
                }
                None => cfg.model.vocab_size,
            };
            ctx.claim(out, false)?;
            uniform_allocate(vocab, cfg.alloc.per_token)?
        }
        AllocMode::Lzw => {
            let data = load_data(cfg, &mut rec)?;
            ctx.claim(out, false)?;
            let vocab = data.tok.vocab_size();
            let lines: Vec<&Vec<u32>> = data.train.lines().collect();
            let counter = count_codewords(&lines, vocab, cfg.alloc.algo)?;
            let v = cfg.alloc.v.unwrap_or(8 * vocab);
            allocate(&counter, v, cfg.alloc.k)?
        }
    };
    table.save(out)?;
    rec.output(out);
    let s = allocation_stats(&table);
    eprintln!("allocation: v={} cap={} max={} mean={:.3} at_cap={}", s.total, s.cap, s.max, s.mean, s.at_cap);
    rec.finish(&sidecar(out), ctx.seed(), ctx.config_value())
}

fn stats(ctx: &Ctx, path: &Path, out: Option<&Path>) -> Result<()> {
    require(path)?;
    let table = AllocationTable::load(path)?;
    let s = allocation_stats(&table);
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        vocab_size: usize,
        total: usize,
        cap: u32,
        max: u32,
        min: u32,
        mean: f64,
        at_cap: usize,
        histogram: &'a std::collections::BTreeMap<u32, usize>,
    }
    let summary = Summary {
        vocab_size: s.vocab_size,
        total: s.total,
        cap: s.cap,
        max: s.max,
        min: s.min,
        mean: s.mean,
        at_cap: s.at_cap,
        histogram: &s.histogram,
    };
    stdout(&serde_json::to_string_pretty(&summary)?)?;
    if let Some(o) = out {
        ctx.claim(o, false)?;
        let mut rec = Recorder::new("stats");
        rec.input(path)?;
        write_json(o, &s)?;
        rec.output(o);
        rec.finish(&sidecar(o), ctx.seed(), ctx.config_value())?;
    }
    Ok(())
}

fn load_alloc(cfg: &RunConfig, rec: &mut Recorder) -> Result<Option<Arc<AllocationTable>>> {
    match &cfg.model.allocation {
        Some(p) => {
            let p = PathBuf::from(p);
            require(&p)?;
            rec.input(&p)?;
            Ok(Some(Arc::new(AllocationTable::load(&p)?)))
        }
        None if cfg.model.has_l3() => Err(usage("L3 layers need an allocation (--alloc or model.allocation)")),
        None => Ok(None),
    }
}

fn train(ctx: &Ctx, resume: Option<&Path>, out: &Path) -> Result<()> {
    match ctx.cfg.model.precision {
        Precision::F32 => train_as::<f32>(ctx, resume, out),
        Precision::F64 => train_as::<f64>(ctx, resume, out),
    }
}

fn train_as<T: Scalar>(ctx: &Ctx, resume: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut rec = Recorder::new("train");
    let data = load_data(cfg, &mut rec)?;
    let mut trainer = match resume {
        Some(p) => {
            require(p)?;
            rec.input(p)?;
            Trainer::resume(Checkpoint::<T>::load(p)?)?
        }
        None => {
            if data.tok.vocab_size() > cfg.model.vocab_size {
                return Err(usage(format!(
                    "tokenizer has {} tokens but model.vocab_size is {}",
                    data.tok.vocab_size(),
                    cfg.model.vocab_size
                )));
            }
            let alloc = load_alloc(cfg, &mut rec)?;
            Trainer::new(build_model::<T>(&cfg.model, alloc)?, cfg.train.clone())?
        }
    };
    ctx.claim(out, true)?;
    let train_stream = data.train.stream();
    let val_stream = data.val.stream();
    let metrics_path = out.join("metrics.jsonl");
    let timing_path = out.join("walltime.jsonl");
    let ckpt = out.join("model.ckpt");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let mut timing = std::io::BufWriter::new(fs::File::create(&timing_path)?);
    let start = Instant::now();
    let total = trainer.config.total_steps();
    eprintln!(
        "training {} params for {} steps on {} tokens ({} held out)",
        trainer.model.num_params(),
        total,
        train_stream.len(),
        val_stream.len()
    );
    let result = trainer.run(&train_stream, &val_stream, Some(&ckpt), &mut |r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        let wall = start.elapsed().as_secs_f64();
        writeln!(timing, "{{\"step\":{},\"wall_time_s\":{:.3}}}", r.step, wall)?;
        if let Some(p) = r.val_ppl {
            eprintln!("step {}/{} loss {:.4} val ppl {:.3} ({:.0}s)", r.step, total, r.train_loss, p, wall);
            metrics.flush()?;
            timing.flush()?;
        }
        Ok(())
    });
    metrics.flush()?;
    timing.flush()?;
    let summary = result?;
    write_json(&out.join("summary.json"), &summary)?;
    for p in [&metrics_path, &timing_path, &ckpt, &out.join("summary.json")] {
        rec.output(p.as_path());
    }
    rec.finish(&out.join("manifest.json"), ctx.seed(), ctx.config_value())
}

fn eval(ctx: &Ctx, ck: &Path, split: &str, max_tokens: Option<usize>, out: Option<&Path>) -> Result<()> {
    require(ck)?;
    match checkpoint_precision(ck)? {
        Precision::F32 => eval_as::<f32>(ctx, ck, split, max_tokens, out),
        Precision::F64 => eval_as::<f64>(ctx, ck, split, max_tokens, out),
    }
}

fn eval_as<T: Scalar>(ctx: &Ctx, ck: &Path, split: &str, max_tokens: Option<usize>, out: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::new("eval");
    if let Some(o) = out {
        ctx.claim(o, false)?;
    }
    rec.input(ck)?;
    let model = Checkpoint::<T>::load(ck)?.model;
    let data = load_data(&ctx.cfg, &mut rec)?;
    let stream = match split {
        "val" => data.val.stream(),
        "train" => data.train.stream(),
        "all" => {
            let mut s = data.train.stream();
            s.push(l3_core::corpus::DOC_SEPARATOR);
            s.extend(data.val.stream());
            s
        }
        other => return Err(usage(format!("unknown split {other:?} (val, train or all)"))),
    };
    let r = eval_perplexity(&model, &stream, model.config.context_length, max_tokens)?;
    let v = json!({ "split": split, "tokens": r.tokens, "nll_sum": r.nll_sum, "mean_nll": r.mean_nll, "perplexity": r.perplexity });
    stdout(&serde_json::to_string(&v)?)?;
    if let Some(o) = out {
        write_json(o, &v)?;
        rec.output(o);
        rec.finish(&sidecar(o), ctx.seed(), ctx.config_value())?;
    }
    Ok(())
}

fn bench(ctx: &Ctx, ck: &Path, out: &Path) -> Result<()> {
    require(ck)?;
    match checkpoint_precision(ck)? {
        Precision::F32 => bench_as::<f32>(ctx, ck, out),
        Precision::F64 => bench_as::<f64>(ctx, ck, out),
    }
}

fn prompts(cfg: &RunConfig, vocab: usize) -> Vec<Vec<u32>> {
    let b = &cfg.bench;
    let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
    (0..b.prompts).map(|_| (0..b.prompt_len).map(|_| rng.gen_range(0..vocab as u32)).collect()).collect()
}

fn bench_as<T: Scalar>(ctx: &Ctx, ck: &Path, out: &Path) -> Result<()> {
    let b = &ctx.cfg.bench;
    let mut rec = Recorder::new("bench");
    rec.input(ck)?;
    let model: Model<T> = Checkpoint::<T>::load(ck)?.model;
    if model.l3.is_empty() {
        return Err(usage("bench needs a checkpoint with L3 layers"));
    }
    if b.prompts == 0 || b.prompt_len == 0 || b.n_new == 0 {
        return Err(usage("bench.prompts, bench.prompt_len and bench.n_new must be positive"));
    }
    ctx.claim(out, true)?;
    let ps = prompts(&ctx.cfg, model.config.vocab_size);
    let latency = match b.latency_ns_per_kb {
        Some(l) => l,
        None => {
            let block = measure_block_ns(&model, &ps[0], b.n_new.max(3))?;
            let alloc = model.alloc.as_ref().expect("L3 model");
            let rows = alloc.cap().min(alloc.total() as u32) as usize;
            let bytes = l3_core::offload::fetch_volume_bytes(rows, model.config.l3_dims(), 1, model.config.tie_kv, T::BYTES);
            (b.fetch_blocks * block * 1024.0 / bytes as f64).round() as u64
        }
    };
    let opts = StoreOptions { latency_ns_per_kb: latency, worst_case: b.worst_case, seed: b.seed };
    let store_path = out.join("tier.bin");
    let store = TierStore::create(&model, &store_path, opts)?;
    let mut resident = Vec::new();
    let mut offloaded = Vec::new();
    let mut summaries = Vec::new();
    let mut identical = true;
    for p in &ps {
        let r = generate(&model, p, b.n_new, Residency::Resident)?;
        let o = generate(&model, p, b.n_new, Residency::Offloaded { store: &store, strict: b.strict })?;
        identical &= r.tokens == o.tokens;
        summaries.push(overlap_report(&o.timing, Some(&r.timing))?);
        resident.push(r.timing);
        offloaded.push(o.timing);
    }
    drop(store);
    let n = summaries.len() as f64;
    let mean = |f: &dyn Fn(&l3_core::offload::OverlapSummary) -> f64| summaries.iter().map(f).sum::<f64>() / n;
    let summary = json!({
        "prompts": ps.len(),
        "n_new": b.n_new,
        "strict": b.strict,
        "latency_ns_per_kb": latency,
        "identical_tokens": identical,
        "mean_stall_ns": mean(&|s| s.mean_stall_ns),
        "zero_stall_fraction": mean(&|s| s.zero_stall_fraction),
        "mean_step_ns": mean(&|s| s.mean_step_ns),
        "overhead_pct": mean(&|s| s.overhead_pct.unwrap_or(0.0)),
        "contracts_held": summaries.iter().all(|s| s.all_awaited && s.issue_before_first_block),
        "per_prompt": summaries,
    });
    let timing_path = out.join("timing.json");
    write_json(&timing_path, &json!({ "resident": resident, "offloaded": offloaded }))?;
    write_json(&out.join("summary.json"), &summary)?;
    fs::remove_file(&store_path)?;
    rec.output(timing_path);
    rec.output(out.join("summary.json"));
    eprintln!(
        "identical tokens: {identical}; mean stall {:.1} us; zero-stall steps {:.1}%",
        summary["mean_stall_ns"].as_f64().unwrap_or(0.0) / 1e3,
        100.0 * summary["zero_stall_fraction"].as_f64().unwrap_or(0.0)
    );
    rec.finish(&out.join("manifest.json"), ctx.seed(), ctx.config_value())
}

fn bench_sweep(ctx: &Ctx, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut rec = Recorder::new("bench");
    let alloc = match load_alloc(cfg, &mut rec)? {
        Some(a) => a,
        None => return Err(usage("the sweep needs an allocation (--alloc or model.allocation)")),
    };
    ctx.claim(out, true)?;
    let mut base = cfg.model.clone();
    base.l3_positions.clear();
    let sc = SweepConfig {
        depths: cfg.bench.depths.clone(),
        fetch_blocks: cfg.bench.fetch_blocks,
        prompts: cfg.bench.prompts,
        prompt_len: cfg.bench.prompt_len,
        n_new: cfg.bench.n_new,
        strict: cfg.bench.strict,
        seed: cfg.bench.seed,
    };
    let tmp = out.join("stores");
    fs::create_dir_all(&tmp)?;
    let r = match base.precision {
        Precision::F32 => masking_sweep::<f32>(&base, alloc, &sc, &tmp),
        Precision::F64 => masking_sweep::<f64>(&base, alloc, &sc, &tmp),
    };
    fs::remove_dir_all(&tmp)?;
    let r = r?;
    for p in &r.points {
        eprintln!(
            "first L3 after {} blocks: mean stall {:.1} us, zero-stall {:.1}%, identical {}",
            p.first_l3_layer,
            p.mean_stall_ns / 1e3,
            100.0 * p.zero_stall_fraction,
            p.identical_tokens
        );
    }
    let path = out.join("sweep.json");
    write_json(&path, &r)?;
    rec.output(path);
    rec.finish(&out.join("manifest.json"), ctx.seed(), ctx.config_value())
}

fn lens(ctx: &Ctx, ck: &Path, out: &Path) -> Result<()> {
    require(ck)?;
    match checkpoint_precision(ck)? {
        Precision::F32 => lens_as::<f32>(ctx, ck, out),
        Precision::F64 => lens_as::<f64>(ctx, ck, out),
    }
}

/// Up to `n` non-overlapping context windows from the start of `stream`.
pub fn devset(stream: &[u32], context: usize, n: usize) -> Vec<Vec<u32>> {
    stream.chunks_exact(context).take(n).map(|c| c.to_vec()).collect()
}

fn lens_as<T: Scalar>(ctx: &Ctx, ck: &Path, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut rec = Recorder::new("lens");
    rec.input(ck)?;
    let model: Model<T> = Checkpoint::<T>::load(ck)?.model;
    let data = load_data(cfg, &mut rec)?;
    let seqs = devset(&data.val.stream(), model.config.context_length, cfg.data.devset_seqs);
    if seqs.is_empty() {
        return Err(anyhow!("held-out split is shorter than one context window"));
    }
    ctx.claim(out, true)?;
    let caps = capture(&model, &seqs)?;
    let lens = train_tuned_lens(&model, &caps, &cfg.lens)?;
    let profile = lens_kl_profile(&lens, &caps)?;
    let drops = drop_stats(&profile);
    let prof_path = out.join("lens_profile.csv");
    write_lens_csv(&prof_path, &profile, Some(&lens.init_kl))?;
    rec.output(&prof_path);
    if model.config.has_l3() {
        let recs = access_kl_stats(&model, &seqs)?;
        let p = out.join("access_kl.csv");
        write_access_csv(&p, &recs)?;
        rec.output(p);
    }
    let summary = json!({
        "devset_sequences": seqs.len(),
        "sites": profile.entries.iter().map(|e| e.site.clone()).collect::<Vec<_>>(),
        "init_kl": lens.init_kl,
        "trained_kl": lens.trained_kl,
        "drops": drops,
    });
    let sp = out.join("lens_summary.json");
    write_json(&sp, &summary)?;
    rec.output(sp);
    for e in &profile.entries {
        eprintln!("{:>8} KL {:.4}", e.site, e.mean_kl);
    }
    rec.finish(&out.join("manifest.json"), ctx.seed(), ctx.config_value())
}

fn matrix(ctx: &Ctx, plan_only: bool, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut rec = Recorder::new("matrix");
    let data = load_data(cfg, &mut rec)?;
    let mut base = cfg.model.clone();
    base.l3_positions.clear();
    base.allocation = None;
    if data.tok.vocab_size() > base.vocab_size {
        return Err(usage(format!("tokenizer has {} tokens but model.vocab_size is {}", data.tok.vocab_size(), base.vocab_size)));
    }
    let lines: Vec<&Vec<u32>> = data.train.lines().collect();
    let counter = count_codewords(&lines, base.vocab_size, cfg.alloc.algo)?;
    let variants = if cfg.matrix.variants.is_empty() {
        standard_variants(base.vocab_size, cfg.total_v(), cfg.alloc.k, cfg.matrix.position, cfg.matrix.sweep_layers)
    } else {
        cfg.matrix.variants.clone()
    };
    let val = data.val.stream();
    let plan = plan_matrix(&base, &variants, Some(&counter), &val)?;
    ctx.claim(out, true)?;
    for p in &plan {
        eprintln!(
            "{:<14} layers {} L3 {:?} params {} FLOP ratio {:.3} E[d_t] {:.2}",
            p.spec.name, p.config.n_layers, p.config.l3_positions, p.total_params, p.flop_ratio, p.mean_dt
        );
    }
    if !plan_only {
        let report = experiment_matrix(&plan, &cfg.train, &data.train.stream(), &val, Some(out))?;
        write_json(&out.join("report.json"), &report)?;
        fs::write(out.join("report.md"), report.to_markdown())?;
        stdout(report.to_markdown().trim_end())?;
        rec.output(out.join("report.json"));
        rec.output(out.join("report.md"));
        for r in &report.rows {
            rec.output(out.join(format!("{}.jsonl", r.name)));
            rec.output(out.join(format!("{}.ckpt", r.name)));
        }
    }
    rec.finish(&out.join("manifest.json"), ctx.seed(), ctx.config_value())
}
