//! Desk-scale training laboratory for tiny decoder-only transformers.
//!
//! Everything runs on CPU, deterministically: a fixed-order autodiff engine,
//! width-scaled model construction, learning-rate schedules with a decay
//! fork-off, Adam with per-tensor multipliers, training-dynamics probes,
//! scaling-law and batch-size-law fitting, int4 group quantization, and a
//! byte-level BPE tokenizer.

pub mod bpe;
pub mod dynamics;
pub mod model;
pub mod optim;
pub mod quant;
pub mod scaling;
pub mod schedule;
pub mod tensor;

pub use tensor::{Elem, Graph, NodeId, TensorData, TensorError};
