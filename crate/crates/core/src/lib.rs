//! Core of the MLGL engine: a small reverse-mode autodiff tensor library, the
//! multi-level graph model (three CNN backbones, semantic node embeddings,
//! local and global context-aware gated GCNs, fusion), its nine-term objective,
//! the training step, and evaluation metrics.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. IO, file formats and the CLI live in the companion `mlgl` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Mode, Tape, Var};
pub use error::{Error, Result};
pub use labels::{LabelSet, Taxonomy};
pub use model::{LevelPredictions, Mlgl, ModelConfig};
pub use optim::{AdamW, AdamWConfig};
pub use params::{BufferId, ParamId, ParamStore};
pub use real::{DType, Real};
pub use rng::{RngState, SeededRng};
pub use tensor::Tensor;

/// Width of every semantic node embedding.
pub const EMBED_DIM: usize = 64;
