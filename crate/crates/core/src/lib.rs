//! Skip-stage shifted-window attention for end-to-end driving.
//!
//! This crate holds everything that is pure computation: a small dense
//! tensor with a reverse-mode tape, the hierarchical window-attention
//! encoder, skip-stage fusion between encoder stages, the perception and
//! control heads, the multi-task loss stack and optimizer, task and
//! leaderboard metrics, and the synthetic scene generator.
//!
//! It is `no_std` and only needs `alloc`. File IO, configuration files and
//! the command-line tools live in the companion `skge` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod controller;
pub mod data;
mod error;
pub mod heads;
pub mod model;
pub mod nn;
mod real;
pub mod record;
pub mod scoring;
pub mod skge;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
