//! Benchmark suite for neural-decoding sequence backbones.
//!
//! Spike trains recorded from a motor-cortex array are binned, smoothed
//! and normalized ([`datapipe`]), then decoded into 2-D cursor velocity by
//! one of four backbones built on a small autodiff engine ([`tensor`],
//! [`backbones`]): GRU, an encoder-decoder Transformer, RWKV and a
//! selective state-space model. The [`harness`] runs single-session,
//! multi-session, fine-tuning and scaling protocols; [`metrics`] computes
//! R², latency and recovery statistics.

pub mod backbones;
pub mod datapipe;
pub mod harness;
pub mod metrics;
pub mod tensor;

pub use backbones::{Model, ModelConfig, ModelKind};
pub use tensor::{Graph, Mode, Params, Tensor};
