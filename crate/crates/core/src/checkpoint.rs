//! Checkpoint file: `"L3CK"`, a `u32` version, a `u64` header length, a JSON
//! header (config, allocation, tensor manifest, training state) and the raw
//! little-endian tensor payload.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationTable;
use crate::error::{bail, Result};
use crate::model::{build_model, Model, ModelConfig, Precision, INIT_SCHEME};
use crate::numeric::{AdamWConfig, OptimizerState, Scalar};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"L3CK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub opt: OptimizerState<T>,
    pub tokens_seen: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: Option<TrainState<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AllocHeader {
    cap: u32,
    counts: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainHeader {
    config: TrainConfig,
    adamw: AdamWConfig,
    step: u64,
    tokens_seen: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    precision: Precision,
    init: String,
    config: ModelConfig,
    allocation: Option<AllocHeader>,
    train: Option<TrainHeader>,
    tensors: Vec<Entry>,
    payload_bytes: u64,
    payload_crc32: u32,
}

/// Precision recorded in a checkpoint file, read from its header only.
pub fn checkpoint_precision(path: impl AsRef<Path>) -> Result<Precision> {
    let bytes = fs::read(path)?;
    Ok(parse_header(&bytes)?.0.precision)
}

/// Model configuration recorded in a checkpoint file.
pub fn checkpoint_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let bytes = fs::read(path)?;
    Ok(parse_header(&bytes)?.0.config)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {}", version);
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = 16u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64);
    let Some(hend) = hend else {
        bail!(Format, "checkpoint header length {} exceeds file size", hlen);
    };
    let header: Header = serde_json::from_slice(&bytes[16..hend as usize])
        .map_err(|e| crate::L3Error::Format(format!("checkpoint header: {e}")))?;
    Ok((header, &bytes[hend as usize..]))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[T], payload: &mut Vec<u8>| {
            let offset = payload.len() as u64;
            for &x in data {
                x.write_le(payload);
            }
            entries.push(Entry {
                name,
                shape,
                offset,
                bytes: (data.len() * T::BYTES) as u64,
            });
        };
        let named = model.named_tensors();
        for (n, t) in &named {
            push(n.clone(), t.shape().to_vec(), t.data(), &mut payload);
        }
        if let Some(st) = &self.train {
            if st.opt.m.len() != named.len() {
                bail!(Invariant, "optimizer has {} buffers for {} tensors", st.opt.m.len(), named.len());
            }
            for (i, (n, t)) in named.iter().enumerate() {
                push(format!("opt.m.{n}"), t.shape().to_vec(), &st.opt.m[i], &mut payload);
                push(format!("opt.v.{n}"), t.shape().to_vec(), &st.opt.v[i], &mut payload);
            }
        }
        let header = Header {
            precision: model.config.precision,
            init: INIT_SCHEME.to_string(),
            config: model.config.clone(),
            allocation: model.alloc.as_ref().map(|a| AllocHeader {
                cap: a.cap(),
                counts: a.counts().to_vec(),
            }),
            train: self.train.as_ref().map(|st| TrainHeader {
                config: st.config.clone(),
                adamw: st.opt.config,
                step: st.opt.step,
                tokens_seen: st.tokens_seen,
                rng: st.rng.clone(),
            }),
            tensors: entries,
            payload_bytes: payload.len() as u64,
            payload_crc32: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = parse_header(bytes)?;
        if h.precision.name() != T::NAME || h.config.precision != h.precision {
            bail!(Format, "checkpoint holds {} tensors, reader expects {}", h.precision.name(), T::NAME);
        }
        if payload.len() as u64 != h.payload_bytes {
            bail!(Format, "payload is {} bytes, header says {}", payload.len(), h.payload_bytes);
        }
        if crc32fast::hash(payload) != h.payload_crc32 {
            bail!(Format, "payload checksum mismatch");
        }
        let alloc = match h.allocation {
            Some(a) => Some(Arc::new(
                AllocationTable::from_counts(a.counts, a.cap).map_err(|e| crate::L3Error::Format(format!("embedded allocation: {e}")))?,
            )),
            None => None,
        };
        let mut model: Model<T> = build_model(&h.config, alloc).map_err(|e| crate::L3Error::Format(format!("embedded config: {e}")))?;
        let names: Vec<(String, Vec<usize>, usize)> =
            model.named_tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec(), t.len())).collect();
        let n_opt = if h.train.is_some() { 2 * names.len() } else { 0 };
        if h.tensors.len() != names.len() + n_opt {
            bail!(Format, "manifest lists {} tensors, config implies {}", h.tensors.len(), names.len() + n_opt);
        }
        let mut cursor = 0u64;
        let mut read = |e: &Entry, name: &str, shape: &[usize], len: usize| -> Result<Vec<T>> {
            if e.name != name || e.shape != shape {
                bail!(Format, "manifest entry {:?} {:?} does not match expected {} {:?}", e.name, e.shape, name, shape);
            }
            if e.offset != cursor || e.bytes != (len * T::BYTES) as u64 {
                bail!(Format, "tensor {} has inconsistent extent", name);
            }
            cursor += e.bytes;
            let raw = &payload[e.offset as usize..(e.offset + e.bytes) as usize];
            Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
        };
        let mut params = Vec::with_capacity(names.len());
        for (e, (n, shape, len)) in h.tensors.iter().zip(&names) {
            params.push(read(e, n, shape, *len)?);
        }
        let train = match h.train {
            None => None,
            Some(th) => {
                let mut opt = OptimizerState::new(th.adamw, &[]);
                opt.step = th.step;
                for (i, (n, shape, len)) in names.iter().enumerate() {
                    let base = names.len() + 2 * i;
                    opt.m.push(read(&h.tensors[base], &format!("opt.m.{n}"), shape, *len)?);
                    opt.v.push(read(&h.tensors[base + 1], &format!("opt.v.{n}"), shape, *len)?);
                }
                Some(TrainState {
                    config: th.config,
                    opt,
                    tokens_seen: th.tokens_seen,
                    rng: th.rng,
                })
            }
        };
        if cursor != h.payload_bytes {
            bail!(Format, "manifest covers {} of {} payload bytes", cursor, h.payload_bytes);
        }
        for (t, data) in model.tensors_mut().into_iter().zip(params) {
            t.data_mut().copy_from_slice(&data);
        }
        Ok(Checkpoint { model, train })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::uniform_allocate;
    use crate::train::Trainer;

    fn model(tie: bool) -> Model<f64> {
        let c = ModelConfig {
            vocab_size: 9,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            d_ff: 8,
            context_length: 8,
            l3_positions: vec![1],
            l3_d_emb: 8,
            l3_d_up: 6,
            tie_kv: tie,
            precision: Precision::F64,
            seed: 1,
            ..Default::default()
        };
        build_model(&c, Some(Arc::new(uniform_allocate(9, 2).unwrap()))).unwrap()
    }

    #[test]
    fn round_trip_with_training_state() {
        for tie in [false, true] {
            let tc = TrainConfig { batch_tokens: 8, total_tokens: 64, warmup_tokens: 8, ..Default::default() };
            let mut tr = Trainer::new(model(tie), tc).unwrap();
            let s: Vec<u32> = (0..100).map(|i| (i * 5 % 9) as u32).collect();
            tr.train_step(&s).unwrap();
            let ck = tr.checkpoint();
            let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let ck = Checkpoint { model: model(false), train: None };
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(crate::L3Error::Format(_))));
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x40;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(crate::L3Error::Format(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]), Err(crate::L3Error::Format(_))));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(crate::L3Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(crate::L3Error::Format(_))));
    }
}
