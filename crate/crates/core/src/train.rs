//! Training loop: packed random windows, AdamW with cosine schedule and global
//! clipping, JSONL metric records, periodic validation and checkpointing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::{bail, Result};
use crate::model::{eval_perplexity, Model};
use crate::numeric::{adamw_step, cosine_lr, AdamWConfig, Graph, OptimizerState, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Tokens per optimizer step (a multiple of the sequence length).
    pub batch_tokens: usize,
    pub total_tokens: usize,
    pub warmup_tokens: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps between validation passes; 0 evaluates only at the end.
    pub eval_interval: u64,
    /// Cap on validation tokens per pass.
    pub eval_tokens: Option<usize>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Seed of the batch sampler.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 4096,
            total_tokens: 30_000_000,
            warmup_tokens: 1_000_000,
            peak_lr: 1e-3,
            min_lr: 1e-4,
            weight_decay: 0.1,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            eval_interval: 500,
            eval_tokens: Some(262_144),
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, context: usize) -> Result<()> {
        if self.batch_tokens == 0 || self.total_tokens < self.batch_tokens {
            bail!(Config, "total tokens {} must be at least the batch size {}", self.total_tokens, self.batch_tokens);
        }
        let seq = self.seq_len(context);
        if self.batch_tokens % seq != 0 {
            bail!(Config, "batch of {} tokens is not a multiple of sequence length {}", self.batch_tokens, seq);
        }
        if self.warmup_tokens > self.total_tokens {
            bail!(Config, "warmup longer than the run");
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0) {
            bail!(Config, "learning rates must be non-negative");
        }
        Ok(())
    }

    pub fn seq_len(&self, context: usize) -> usize {
        context.min(self.batch_tokens)
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_tokens / self.batch_tokens) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_tokens / self.batch_tokens) as u64
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.peak_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One metrics line. Wall-clock time is kept out so reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub tokens: u64,
    pub train_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub tokens: u64,
    pub final_train_loss: f64,
    pub final_val_ppl: Option<f64>,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub opt: OptimizerState<T>,
    pub tokens_seen: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.context_length)?;
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
        let opt = OptimizerState::new(config.adamw(), &sizes);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            opt,
            tokens_seen: 0,
            rng,
        })
    }

    /// Continue from a checkpoint carrying training state.
    pub fn resume(ckpt: Checkpoint<T>) -> Result<Self> {
        let Some(st) = ckpt.train else {
            bail!(Config, "checkpoint has no training state to resume from");
        };
        st.config.validate(ckpt.model.config.context_length)?;
        Ok(Trainer {
            model: ckpt.model,
            config: st.config,
            opt: st.opt,
            tokens_seen: st.tokens_seen,
            rng: st.rng,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: Some(TrainState {
                config: self.config.clone(),
                opt: self.opt.clone(),
                tokens_seen: self.tokens_seen,
                rng: self.rng.clone(),
            }),
        }
    }

    /// Draw `batch_tokens / seq_len` random windows; returns (inputs, targets).
    pub fn sample_batch(&mut self, stream: &[u32]) -> Result<(Vec<u32>, Vec<u32>)> {
        let seq = self.config.seq_len(self.model.config.context_length);
        if stream.len() < seq + 1 {
            bail!(Config, "training stream of {} tokens is shorter than one window", stream.len());
        }
        let n_seq = self.config.batch_tokens / seq;
        let mut inputs = Vec::with_capacity(n_seq * seq);
        let mut targets = Vec::with_capacity(n_seq * seq);
        for _ in 0..n_seq {
            let start = self.rng.gen_range(0..=stream.len() - seq - 1);
            inputs.extend_from_slice(&stream[start..start + seq]);
            targets.extend_from_slice(&stream[start + 1..start + seq + 1]);
        }
        Ok((inputs, targets))
    }

    /// One optimizer step on a given batch. Parameters are untouched on error.
    pub fn train_on(&mut self, inputs: &[u32], targets: &[u32]) -> Result<StepRecord> {
        let seq = self.config.seq_len(self.model.config.context_length);
        let total = self.config.total_steps();
        let next = (self.opt.step + 1).min(total);
        let lr = cosine_lr(next, self.config.warmup_steps().min(total), total, self.config.peak_lr, self.config.min_lr)?;
        let mut g = Graph::new();
        let vars = self.model.register(&mut g);
        let logits = self.model.forward_graph(&mut g, &vars, inputs, seq)?;
        let tgt: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let step = self.opt.step + 1;
        let loss = g.cross_entropy(logits, &tgt).map_err(|e| match e {
            crate::L3Error::Numeric(m) => crate::L3Error::Training(format!("step {step}: {m}")),
            other => other,
        })?;
        let loss_val = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        if !loss_val.is_finite() {
            bail!(Training, "non-finite loss {} at step {}", loss_val, self.opt.step + 1);
        }
        g.backward(loss)?;
        let mut grads: Vec<Vec<T>> = vars
            .order
            .iter()
            .zip(self.model.named_tensors())
            .map(|(&v, (_, t))| g.take_grad(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
            .collect();
        drop(g);
        let mask = self.model.decay_mask();
        let mut params: Vec<&mut [T]> = self.model.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        let norm = adamw_step(&mut params, &mut grads, &mut self.opt, lr, self.config.clip, Some(&mask))
            .map_err(|e| crate::L3Error::Training(format!("step {}: {}", self.opt.step + 1, e)))?;
        self.tokens_seen += inputs.len() as u64;
        Ok(StepRecord {
            step: self.opt.step,
            tokens: self.tokens_seen,
            train_loss: loss_val,
            lr,
            grad_norm: norm,
            val_ppl: None,
        })
    }

    /// Sample a batch from `stream` and take one step.
    pub fn train_step(&mut self, stream: &[u32]) -> Result<StepRecord> {
        let (x, y) = self.sample_batch(stream)?;
        self.train_on(&x, &y)
    }

    pub fn validate(&self, val: &[u32]) -> Result<f64> {
        let ctx = self.model.config.context_length;
        Ok(eval_perplexity(&self.model, val, ctx, self.config.eval_tokens)?.perplexity)
    }

    /// Train to the end of the schedule. Each record goes to `sink`; checkpoints go
    /// to `ckpt_path` when given, including the last good state on failure.
    pub fn run(
        &mut self,
        train: &[u32],
        val: &[u32],
        ckpt_path: Option<&Path>,
        sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<RunSummary> {
        let total = self.config.total_steps();
        let mut last_loss = f64::NAN;
        let mut last_ppl = None;
        if self.opt.step >= total {
            if let Some(p) = ckpt_path {
                self.checkpoint().save(p)?;
            }
        }
        while self.opt.step < total {
            let mut rec = match self.train_step(train) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(p) = ckpt_path {
                        self.checkpoint().save(p)?;
                    }
                    return Err(e);
                }
            };
            let done = self.opt.step == total;
            let ei = self.config.eval_interval;
            if !val.is_empty() && (done || (ei > 0 && rec.step % ei == 0)) {
                let ppl = self.validate(val)?;
                rec.val_ppl = Some(ppl);
                last_ppl = Some(ppl);
            }
            last_loss = rec.train_loss;
            sink(&rec)?;
            let ci = self.config.checkpoint_interval;
            if let Some(p) = ckpt_path {
                if done || (ci > 0 && rec.step % ci == 0) {
                    self.checkpoint().save(p)?;
                }
            }
        }
        Ok(RunSummary {
            steps: self.opt.step,
            tokens: self.tokens_seen,
            final_train_loss: last_loss,
            final_val_ppl: last_ppl,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, Precision};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            d_ff: 16,
            context_length: 8,
            precision: Precision::F64,
            seed: 5,
            ..Default::default()
        }
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            batch_tokens: 16,
            total_tokens: 16 * 20,
            warmup_tokens: 32,
            eval_interval: 10,
            eval_tokens: None,
            ..Default::default()
        }
    }

    fn stream() -> Vec<u32> {
        (0..400u32).map(|i| (i * i + 3 * i) % 13).collect()
    }

    #[test]
    fn config_validation() {
        let mut t = tcfg();
        t.total_tokens = 8;
        assert!(t.validate(8).is_err());
        let mut t = tcfg();
        t.batch_tokens = 12;
        assert!(t.validate(8).is_err());
        assert!(tcfg().validate(8).is_ok());
    }

    #[test]
    fn zero_lr_changes_nothing_without_decay() {
        let m = build_model::<f64>(&cfg(), None).unwrap();
        let mut t = tcfg();
        t.peak_lr = 0.0;
        t.min_lr = 0.0;
        t.weight_decay = 0.0;
        let mut tr = Trainer::new(m.clone(), t).unwrap();
        let s = stream();
        let (x, y) = tr.sample_batch(&s).unwrap();
        let a = tr.train_on(&x, &y).unwrap();
        let b = tr.train_on(&x, &y).unwrap();
        assert_eq!(a.train_loss, b.train_loss);
        assert_eq!(tr.model, m);
    }

    #[test]
    fn loss_decreases_and_records_are_deterministic() {
        let run = || {
            let m = build_model::<f64>(&cfg(), None).unwrap();
            let mut tr = Trainer::new(m, tcfg()).unwrap();
            let mut recs = Vec::new();
            let s = stream();
            tr.run(&s[..300], &s[300..], None, &mut |r| {
                recs.push(serde_json::to_string(r).unwrap());
                Ok(())
            })
            .unwrap();
            recs
        };
        let a = run();
        assert_eq!(a.len(), 20);
        assert_eq!(a, run());
        let first: StepRecord = serde_json::from_str(&a[0]).unwrap();
        let last: StepRecord = serde_json::from_str(&a[19]).unwrap();
        assert!(last.train_loss < first.train_loss);
        assert!(last.val_ppl.is_some());
    }

    #[test]
    fn nan_loss_aborts_and_keeps_parameters() {
        let mut m = build_model::<f64>(&cfg(), None).unwrap();
        m.unemb.data_mut()[0] = f64::NAN;
        let before = m.clone();
        let mut tr = Trainer::new(m, tcfg()).unwrap();
        let s = stream();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("last.ckpt");
        let err = tr.run(&s, &[], Some(&p), &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, crate::L3Error::Training(_)));
        let ck = Checkpoint::<f64>::load(&p).unwrap();
        assert_eq!(ck.train.unwrap().opt.step, 0);
        assert!(ck.model.unemb.data()[0].is_nan());
        assert_eq!(ck.model.blocks, before.blocks);
    }
}
