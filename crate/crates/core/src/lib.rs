//! Large lookup layers: statically token-routed embedding tables with LZW-driven
//! allocation, block-diagonal batched execution, a desk-scale transformer trainer,
//! offloaded inference with prefetch, and analysis tooling.

pub mod allocation;
pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod layer;
pub mod model;
pub mod numeric;
pub mod offload;
pub mod par;
pub mod tokenizer;
pub mod train;

pub use error::{L3Error, Result};
