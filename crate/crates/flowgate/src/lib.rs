//! flowgate: a desk-scale recurrent optical flow engine with a learned
//! per-iteration skip gate.
//!
//! The engine refines a dense flow field with a small recurrent update
//! operator over an all-pairs feature correlation volume. A lightweight
//! gating network decides, per sample and per step, whether the next
//! refinement iteration is worth its cost relative to a target compute
//! budget; at inference time skipped iterations carry the previous state
//! forward bit-identically and are charged zero update FLOPs in the
//! analytic cost ledger.
//!
//! Everything runs in `f64` on the CPU from a single top-level seed, so
//! runs are byte-reproducible. Training differentiates through the gate
//! with a two-class Gumbel-softmax relaxation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod flops;
pub mod flownet;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod numgrad;
pub mod optim;
pub mod policy;
pub mod seeds;
pub mod synthdata;
pub mod tensor;
pub(crate) mod wire;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
