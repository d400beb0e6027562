//! Gated low-rank adaptation with automatic layer positioning.
//!
//! A frozen multi-layer backbone is adapted to a shifted target domain by
//! low-rank adapters whose injection sites are chosen for it: every candidate
//! layer carries a sigmoid gate, the gates are trained against a validation
//! objective through a first-order hypergradient estimator, and the top-k
//! layers by gate value are the ones fine-tuned. The training signal is a
//! directional loss in a frozen embedding space — one minus the cosine
//! between the model's input-to-output embedding displacement and an anchored
//! target direction — so no paired references are needed.
//!
//! The crate also ships a synthetic planted-bottleneck harness: tasks whose
//! ground-truth bottleneck layers are known by construction, plus a
//! brute-force subset oracle to score any selection against exhaustive
//! search.

pub mod bilevel;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod h2c;
pub mod lora;
pub mod oracle;
pub mod rng;
pub mod sweep;
pub mod tape;
pub mod task;
pub mod tensor;

pub mod baselines;

pub use error::{Error, Result};
pub use tensor::Tensor;
