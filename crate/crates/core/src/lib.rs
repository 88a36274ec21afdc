//! Core of the reasoning-lens laboratory: a small reverse-mode autodiff, a
//! two-stream vision-language transformer, a synthetic visual question
//! answering task with oracle and noisy visual encodings, training with
//! oracle-parameter transfer, and the attention analyses (k-numbers,
//! attention modes, behavior vectors, t-SNE, pruning, rare-answer
//! evaluation).
//!
//! The crate is `no_std` + `alloc`; the `std` feature (on by default) only
//! enables faster math and matrix kernels in dependencies.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod lab;
mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{LensError, Result};
