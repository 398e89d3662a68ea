//! Losses and samplers for the data-only model (MDLM), the fully joint model
//! (FUJI) and the sequential model (SEQ).

mod grid;
mod model;
mod sample;

pub use grid::{make_time_grid, TimeGrid};
pub use model::{
    fuji_loss, mdlm_loss, seq_loss, LddmModel, LossBreakdown, ModelFamily, ModelSpec, Schedules, Weighting,
};
pub use sample::{
    fuji_sample, mdlm_sample, seq_sample, ConditionalPredictor, DataPredictor, JointPredictor, LatentPredictor,
    LatentStep, NetworkPredictor, Samples,
};

use rand::Rng;

use crate::backbone::ParameterStore;
use crate::error::Result;

/// How a trained model is sampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePlan {
    /// Data-channel steps (FUJI: steps of both channels).
    pub budget: usize,
    /// Latent-chain steps for SEQ.
    pub latent_steps: usize,
    pub latent_step: LatentStep,
}

/// Draw `n` samples from a network-backed model.
pub fn sample_model<R: Rng + ?Sized>(
    model: &LddmModel,
    store: &ParameterStore,
    sch: &Schedules,
    plan: SamplePlan,
    n: usize,
    rng: &mut R,
) -> Result<Samples> {
    let mut pred = NetworkPredictor::new(model, store, sch);
    let (s, k) = (model.seq_len(), model.vocab());
    let shape = (model.latent_blocks(), model.latent_dim());
    let grid = make_time_grid(sch.mask.steps(), plan.budget)?;
    match model.family() {
        ModelFamily::Mdlm => mdlm_sample(&mut pred, &grid, n, s, k, &sch.mask, rng),
        ModelFamily::Fuji => fuji_sample(&mut pred, &grid, n, s, k, shape, sch, plan.latent_step, rng),
        ModelFamily::Seq => {
            let lgrid = make_time_grid(sch.latent.steps(), plan.latent_steps)?;
            let mut lpred = NetworkPredictor::new(model, store, sch);
            seq_sample(&mut lpred, &mut pred, &lgrid, &grid, n, s, k, shape, sch, plan.latent_step, rng)
        }
    }
}

#[cfg(test)]
mod tests;
