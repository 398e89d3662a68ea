//! Latent discrete diffusion: masked token diffusion coupled with continuous
//! latent diffusion over unit-normalized latent blocks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod continuous;
pub mod discrete;
pub mod encoder;
pub mod error;
pub mod lddm;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sawtooth;
pub mod schedules;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{LddmError, Result};
