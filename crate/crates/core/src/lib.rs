//! Activation-spike lab.
//!
//! A small decoder-only GLU transformer with simulated INT8 execution, plus
//! the tooling to find where activation spikes live and to keep them out of
//! the quantizer:
//!
//! - [`calibration`] records token-wise input-activation scales per linear
//!   module;
//! - [`qfem`] scores modules by their max-median ratio and picks the set that
//!   stays out of activation quantization;
//! - [`qfep`] searches a three-token prefix whose full-precision KV cache
//!   absorbs first-occurrence spikes;
//! - [`eval`] measures perplexity, last-hidden MSE and latency;
//! - [`synth`] builds small models that exhibit spikes on purpose.
//!
//! Heavy loops fan out over rayon when the `parallel` feature is on (the
//! default) and fall back to plain iteration otherwise; results are identical
//! either way.

pub mod calibration;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod qfem;
pub mod qfep;
pub mod quant;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModuleId, ModuleKind, TokenId};
pub use tensor::Tensor;
