//! Core of a bi-directional one-to-many embedding model for text-based person
//! retrieval: tensors and reverse-mode autodiff, multi-grained encoders, the
//! REM-G embedding groups, the identity and compound ranking objectives,
//! training, evaluation and ablation drivers.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line
//! live in the companion `beat` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod export;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod remg;
pub mod tensor;
pub mod train;

pub use error::{BeatError, Result};
pub use tensor::Tensor;
