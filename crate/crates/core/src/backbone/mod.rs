//! Denoiser networks and the machinery to differentiate them.
//!
//! * [`Dit`]: single-stream transformer over token sequences.
//! * [`MmDit`]: two-stream transformer (tokens and latent blocks) with one
//!   joint attention over both streams and stream-specific everything else.
//! * [`LatentMlp`]: residual MLP over latent blocks, used as the latent
//!   denoiser of the sequential model.
//!
//! All networks keep their weights in a shared [`ParameterStore`] under a
//! name prefix and run on a [`Graph`] in either `f32` or `f64`.

mod graph;
mod layers;
mod mlp;
mod mmdit;
mod params;
pub mod tape;

pub use graph::{loss_gradients, Graph};
pub use layers::sinusoidal_embedding;
pub use mlp::LatentMlp;
pub use mmdit::{LatentInput, MmDit, MmDitHeads, MmDitOutput};
pub use params::{Checkpoint, GradStore, ParameterStore};
pub use tape::{Real, Tape, Var};

use crate::error::{ensure, invalid, Result};

pub use layers::Dit;

/// Shape and regularization settings shared by all networks.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Vocabulary size including the mask token.
    pub vocab: usize,
    pub seq_len: usize,
    pub latent_blocks: usize,
    pub latent_dim: usize,
    pub time_conditioned: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.1,
            vocab: 3,
            seq_len: 128,
            latent_blocks: 1,
            latent_dim: 32,
            time_conditioned: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden > 0 && self.heads > 0, invalid!("hidden and heads must be positive"));
        ensure!(
            self.hidden.is_multiple_of(self.heads),
            invalid!("hidden {} not divisible by heads {}", self.hidden, self.heads)
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            invalid!("dropout {} outside [0, 1)", self.dropout)
        );
        ensure!(self.vocab >= 2, invalid!("vocabulary needs at least one token plus mask"));
        ensure!(self.seq_len >= 1, invalid!("sequence length must be positive"));
        ensure!(self.mlp_ratio >= 1, invalid!("mlp ratio must be positive"));
        Ok(())
    }

    pub fn mask_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }
}

/// Standard deviation of freshly initialized weight matrices.
pub const INIT_STD: f64 = 0.02;

#[cfg(test)]
mod tests;
