//! Gaussian forward noising, ancestral and DDIM reverse steps, and the
//! latent reconstruction loss.

use rand::Rng;

use crate::error::{ensure, invalid, LddmError, Result};
use crate::rng::normal;
use crate::schedules::{bridge_coefficients, continuous_weight, ContinuousSchedule, WeightMode};

/// `blocks` vectors of dimension `dim`, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    data: Vec<f64>,
    blocks: usize,
    dim: usize,
}

impl LatentState {
    pub fn new(data: Vec<f64>, blocks: usize, dim: usize) -> Result<Self> {
        ensure!(
            data.len() == blocks * dim,
            LddmError::ShapeMismatch(format!("{} values for {blocks}x{dim}", data.len()))
        );
        ensure!(data.iter().all(|v| v.is_finite()), invalid!("latent contains non-finite values"));
        Ok(LatentState { data, blocks, dim })
    }

    pub fn zeros(blocks: usize, dim: usize) -> Self {
        LatentState { data: vec![0.0; blocks * dim], blocks, dim }
    }

    pub fn standard_normal<R: Rng + ?Sized>(blocks: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..blocks * dim).map(|_| scale * normal(rng)).collect();
        LatentState { data, blocks, dim }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn block_norms(&self) -> Vec<f64> {
        (0..self.blocks)
            .map(|i| self.block(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn sq_dist(&self, other: &LatentState) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    fn check_same(&self, other: &LatentState) -> Result<()> {
        ensure!(
            self.blocks == other.blocks && self.dim == other.dim,
            LddmError::ShapeMismatch(format!(
                "latent {}x{} vs {}x{}",
                self.blocks, self.dim, other.blocks, other.dim
            ))
        );
        Ok(())
    }
}

/// `alpha_bar[t] * y0 + sigma_bar[t] * eps`.
pub fn gauss_forward_sample<R: Rng + ?Sized>(
    y0: &LatentState,
    t: usize,
    cs: &ContinuousSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    ensure!(t <= cs.steps(), invalid!("step {t} outside [0, {}]", cs.steps()));
    let (a, s) = (cs.alpha_bar(t), cs.sigma_bar(t));
    let data = y0.data.iter().map(|&v| a * v + s * normal(rng)).collect();
    Ok(LatentState { data, blocks: y0.blocks, dim: y0.dim })
}

/// Ancestral step `t -> s` through the Gaussian bridge around `y0_pred`.
pub fn gauss_ancestral_step<R: Rng + ?Sized>(
    yt: &LatentState,
    y0_pred: &LatentState,
    s: usize,
    t: usize,
    cs: &ContinuousSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    yt.check_same(y0_pred)?;
    let b = bridge_coefficients(cs, s, t)?;
    let sd = b.var.sqrt();
    let data = yt
        .data
        .iter()
        .zip(&y0_pred.data)
        .map(|(&yt, &y0)| {
            let mean = b.mu_coef_yt * yt + b.mu_coef_y0 * y0;
            if sd > 0.0 {
                mean + sd * normal(rng)
            } else {
                mean
            }
        })
        .collect();
    Ok(LatentState { data, blocks: yt.blocks, dim: yt.dim })
}

/// Generalized step with stochasticity `eta` in `[0, 1]`; `eta = 1` is the
/// ancestral bridge, `eta = 0` is deterministic.
pub fn gauss_ddim_step<R: Rng + ?Sized>(
    yt: &LatentState,
    y0_pred: &LatentState,
    s: usize,
    t: usize,
    cs: &ContinuousSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<LatentState> {
    yt.check_same(y0_pred)?;
    ensure!((0.0..=1.0).contains(&eta), invalid!("eta {eta} outside [0, 1]"));
    let b = bridge_coefficients(cs, s, t)?;
    let (a_s, a_t) = (cs.alpha_bar(s), cs.alpha_bar(t));
    let (sig_s, sig_t) = (cs.sigma_bar(s), cs.sigma_bar(t));
    let noise_var = eta * eta * b.var;
    let dir = sig_s * sig_s - noise_var;
    ensure!(dir >= -1e-15, invalid!("sigma_bar[s]^2 < eta^2 * bridge variance"));
    let dir = dir.max(0.0).sqrt();
    let sd = noise_var.sqrt();
    let data = yt
        .data
        .iter()
        .zip(&y0_pred.data)
        .map(|(&yt, &y0)| {
            let eps_hat = (yt - a_t * y0) / sig_t;
            let det = a_s * y0 + dir * eps_hat;
            if sd > 0.0 {
                det + sd * normal(rng)
            } else {
                det
            }
        })
        .collect();
    Ok(LatentState { data, blocks: yt.blocks, dim: yt.dim })
}

/// `w_t * ||y0 - y0_pred||^2`.
pub fn gauss_loss_term(
    y0: &LatentState,
    y0_pred: &LatentState,
    t: usize,
    cs: &ContinuousSchedule,
    mode: WeightMode,
) -> Result<f64> {
    let d = y0.sq_dist(y0_pred)?;
    if d == 0.0 {
        return Ok(0.0);
    }
    Ok(continuous_weight(cs, t, mode)? * d)
}
