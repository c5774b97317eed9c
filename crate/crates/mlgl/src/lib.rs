//! Audio IO, features, dataset handling, checkpoints, statistics and the
//! training driver around [`mlgl_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod run;
pub mod stats;
pub mod synth;
pub mod wav;

pub use error::{Error, Result};
