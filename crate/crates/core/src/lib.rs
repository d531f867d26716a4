//! Prototype-driven region generation and confidence-weighted region
//! assessment for occluded person re-identification.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece:
//! a small reverse-mode autograd, the patch encoder, prompt prototypes,
//! soft region masks, the assessment module with its memory bank, the
//! training objectives, retrieval metrics, and the two-stage training loop.
//! File and CLI handling live in the companion `rga` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod matching;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod prototypes;
pub mod ram;
pub mod rgm;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use config::Config;
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Matrix;
