use rand::Rng;

use super::grid::TimeGrid;
use super::model::{LddmModel, Schedules};
use crate::backbone::{Graph, ParameterStore};
use crate::continuous::{gauss_ancestral_step, gauss_ddim_step, LatentState};
use crate::discrete::{mask_reverse_step, CategoricalField, TokenSequence};
use crate::encoder::{flatten_tokens, unit_normalize_blocks};
use crate::error::{ensure, invalid, LddmError, Result};
use crate::schedules::{ContinuousSchedule, MaskSchedule};

/// Clean-token predictions for a batch of partially masked sequences.
pub trait DataPredictor {
    fn predict_tokens(&mut self, xt: &[TokenSequence], t: usize) -> Result<Vec<CategoricalField>>;
}

/// Shared clean-token and clean-latent predictions at a common step.
pub trait JointPredictor {
    fn predict_joint(
        &mut self,
        xt: &[TokenSequence],
        yt: &[LatentState],
        t: usize,
    ) -> Result<(Vec<CategoricalField>, Vec<LatentState>)>;
}

pub trait LatentPredictor {
    fn predict_latent(&mut self, yt: &[LatentState], t: usize) -> Result<Vec<LatentState>>;
}

/// Clean-token predictions given a clean latent; no time input.
pub trait ConditionalPredictor {
    fn predict_given(&mut self, xt: &[TokenSequence], y0: &[LatentState]) -> Result<Vec<CategoricalField>>;
}

/// Reverse update used on the latent channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LatentStep {
    Ancestral,
    Ddim { eta: f64 },
}

#[derive(Clone, Debug)]
pub struct Samples {
    pub tokens: Vec<TokenSequence>,
    /// Final latents (FUJI) or the conditioning latents (SEQ); empty for MDLM.
    pub latents: Vec<LatentState>,
    /// Denoiser evaluations per sample.
    pub nfe: usize,
    pub data_steps: usize,
}

fn check_grid(grid: &TimeGrid, steps: usize, what: &str) -> Result<()> {
    ensure!(
        grid.horizon() == steps,
        invalid!("{what} grid starts at {} but the schedule has {steps} steps", grid.horizon())
    );
    Ok(())
}

/// Unmask a batch along `grid`, calling `predict` once per interval.
fn discrete_chain<R, P>(
    mut x: Vec<TokenSequence>,
    grid: &TimeGrid,
    ms: &MaskSchedule,
    rng: &mut R,
    mut predict: P,
) -> Result<Vec<TokenSequence>>
where
    R: Rng + ?Sized,
    P: FnMut(&[TokenSequence], usize, usize, &mut R) -> Result<Vec<CategoricalField>>,
{
    check_grid(grid, ms.steps(), "data")?;
    for (t, s) in grid.intervals() {
        let probs = predict(&x, t, s, rng)?;
        ensure!(
            probs.len() == x.len(),
            LddmError::ShapeMismatch(format!("{} predictions for {} sequences", probs.len(), x.len()))
        );
        for (xi, pi) in x.iter_mut().zip(&probs) {
            let before = xi.masked_count();
            let next = mask_reverse_step(xi, pi, s, t, ms, rng)?;
            if next.masked_count() > before {
                return Err(LddmError::Internal("reverse step re-masked a token".into()));
            }
            *xi = next;
        }
    }
    if x.iter().any(|xi| xi.masked_count() > 0) {
        return Err(LddmError::Internal("mask tokens remain after the final step".into()));
    }
    Ok(x)
}

fn latent_update<R: Rng + ?Sized>(
    y: &LatentState,
    y0: &LatentState,
    s: usize,
    t: usize,
    cs: &ContinuousSchedule,
    step: LatentStep,
    rng: &mut R,
) -> Result<LatentState> {
    match step {
        LatentStep::Ancestral => gauss_ancestral_step(y, y0, s, t, cs, rng),
        LatentStep::Ddim { eta } => gauss_ddim_step(y, y0, s, t, cs, eta, rng),
    }
}

fn prior_latents<R: Rng + ?Sized>(n: usize, blocks: usize, dim: usize, cs: &ContinuousSchedule, rng: &mut R) -> Vec<LatentState> {
    let sd = cs.sigma_bar(cs.steps());
    (0..n).map(|_| LatentState::standard_normal(blocks, dim, sd, rng)).collect()
}

/// Sample `n` sequences from the data-only model, starting fully masked.
pub fn mdlm_sample<P: DataPredictor, R: Rng + ?Sized>(
    pred: &mut P,
    grid: &TimeGrid,
    n: usize,
    seq_len: usize,
    vocab: usize,
    ms: &MaskSchedule,
    rng: &mut R,
) -> Result<Samples> {
    let x = vec![TokenSequence::all_masked(seq_len, vocab)?; n];
    let mut nfe = 0;
    let tokens = discrete_chain(x, grid, ms, rng, |x, t, _, _| {
        nfe += 1;
        pred.predict_tokens(x, t)
    })?;
    Ok(Samples { tokens, latents: Vec::new(), nfe, data_steps: grid.budget() })
}

/// Joint sampling: one predictor call per interval drives both channels.
#[allow(clippy::too_many_arguments)]
pub fn fuji_sample<P: JointPredictor, R: Rng + ?Sized>(
    pred: &mut P,
    grid: &TimeGrid,
    n: usize,
    seq_len: usize,
    vocab: usize,
    latent_shape: (usize, usize),
    sch: &Schedules,
    step: LatentStep,
    rng: &mut R,
) -> Result<Samples> {
    check_grid(grid, sch.latent.steps(), "latent")?;
    let (blocks, dim) = latent_shape;
    let mut y = prior_latents(n, blocks, dim, &sch.latent, rng);
    let x = vec![TokenSequence::all_masked(seq_len, vocab)?; n];
    let mut nfe = 0;
    let tokens = discrete_chain(x, grid, &sch.mask, rng, |x, t, s, rng| {
        nfe += 1;
        let (probs, y0) = pred.predict_joint(x, &y, t)?;
        ensure!(y0.len() == y.len(), LddmError::ShapeMismatch("latent prediction count".into()));
        let mut next = Vec::with_capacity(y.len());
        for (yi, y0i) in y.iter().zip(&y0) {
            next.push(latent_update(yi, y0i, s, t, &sch.latent, step, rng)?);
        }
        y = next;
        Ok(probs)
    })?;
    Ok(Samples { tokens, latents: y, nfe, data_steps: grid.budget() })
}

/// Sequential sampling: resolve the latent chain to a clean latent, renormalize
/// it, then run the discrete chain conditioned on it.
#[allow(clippy::too_many_arguments)]
pub fn seq_sample<L, D, R>(
    latent_pred: &mut L,
    data_pred: &mut D,
    latent_grid: &TimeGrid,
    data_grid: &TimeGrid,
    n: usize,
    seq_len: usize,
    vocab: usize,
    latent_shape: (usize, usize),
    sch: &Schedules,
    step: LatentStep,
    rng: &mut R,
) -> Result<Samples>
where
    L: LatentPredictor,
    D: ConditionalPredictor,
    R: Rng + ?Sized,
{
    check_grid(latent_grid, sch.latent.steps(), "latent")?;
    let (blocks, dim) = latent_shape;
    let mut y = prior_latents(n, blocks, dim, &sch.latent, rng);
    let mut nfe = 0;
    for (t, s) in latent_grid.intervals() {
        nfe += 1;
        let y0 = latent_pred.predict_latent(&y, t)?;
        ensure!(y0.len() == y.len(), LddmError::ShapeMismatch("latent prediction count".into()));
        let mut next = Vec::with_capacity(y.len());
        for (yi, y0i) in y.iter().zip(&y0) {
            next.push(latent_update(yi, y0i, s, t, &sch.latent, step, rng)?);
        }
        y = next;
    }
    let y_hat = y.iter().map(unit_normalize_blocks).collect::<Result<Vec<_>>>()?;
    let x = vec![TokenSequence::all_masked(seq_len, vocab)?; n];
    let tokens = discrete_chain(x, data_grid, &sch.mask, rng, |x, _, _, _| {
        nfe += 1;
        data_pred.predict_given(x, &y_hat)
    })?;
    Ok(Samples { tokens, latents: y_hat, nfe, data_steps: data_grid.budget() })
}

/// Network-backed predictor for every family; evaluates in `f32` in chunks.
pub struct NetworkPredictor<'a> {
    model: &'a LddmModel,
    store: &'a ParameterStore,
    mask_steps: usize,
    latent_steps: usize,
    chunk: usize,
}

impl<'a> NetworkPredictor<'a> {
    pub const DEFAULT_CHUNK: usize = 512;

    pub fn new(model: &'a LddmModel, store: &'a ParameterStore, sch: &Schedules) -> Self {
        NetworkPredictor {
            model,
            store,
            mask_steps: sch.mask.steps(),
            latent_steps: sch.latent.steps(),
            chunk: Self::DEFAULT_CHUNK,
        }
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    fn fields(&self, logits: &[f32], n: usize) -> Result<Vec<CategoricalField>> {
        let (s, k) = (self.model.seq_len(), self.model.vocab());
        let per = s * (k - 1);
        (0..n)
            .map(|i| {
                let row: Vec<f64> = logits[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
                CategoricalField::from_logits(&row, s, k)
            })
            .collect()
    }

    fn latents(&self, vals: &[f32], n: usize) -> Result<Vec<LatentState>> {
        let (b, d) = (self.model.latent_blocks(), self.model.latent_dim());
        (0..n)
            .map(|i| LatentState::new(vals[i * b * d..(i + 1) * b * d].iter().map(|&v| v as f64).collect(), b, d))
            .collect()
    }

    fn flat_latents(ys: &[LatentState]) -> Vec<f64> {
        ys.iter().flat_map(|y| y.data().iter().copied()).collect()
    }
}

fn contiguous(a: &ndarray::Array2<f32>) -> &[f32] {
    a.as_slice().expect("tape values are contiguous")
}

impl DataPredictor for NetworkPredictor<'_> {
    fn predict_tokens(&mut self, xt: &[TokenSequence], t: usize) -> Result<Vec<CategoricalField>> {
        let mut out = Vec::with_capacity(xt.len());
        for chunk in xt.chunks(self.chunk) {
            let tokens = flatten_tokens(chunk, self.model.seq_len())?;
            let t_norm = vec![t as f64 / self.mask_steps as f64; chunk.len()];
            let mut g = Graph::<f32>::eval(self.store);
            let logits = self.model.mdlm_logits(&mut g, &tokens, &t_norm)?;
            out.extend(self.fields(contiguous(g.tape.value(logits)), chunk.len())?);
        }
        Ok(out)
    }
}

impl JointPredictor for NetworkPredictor<'_> {
    fn predict_joint(
        &mut self,
        xt: &[TokenSequence],
        yt: &[LatentState],
        t: usize,
    ) -> Result<(Vec<CategoricalField>, Vec<LatentState>)> {
        ensure!(xt.len() == yt.len(), LddmError::ShapeMismatch("token and latent batch sizes differ".into()));
        let (b, d) = (self.model.latent_blocks(), self.model.latent_dim());
        let (mut fields, mut lats) = (Vec::with_capacity(xt.len()), Vec::with_capacity(xt.len()));
        for (xc, yc) in xt.chunks(self.chunk).zip(yt.chunks(self.chunk)) {
            let tokens = flatten_tokens(xc, self.model.seq_len())?;
            let t_norm = vec![t as f64 / self.mask_steps as f64; xc.len()];
            let mut g = Graph::<f32>::eval(self.store);
            let y = g.input_vec(xc.len() * b, d, &Self::flat_latents(yc))?;
            let (logits, y0) = self.model.fuji_outputs(&mut g, &tokens, y, &t_norm)?;
            fields.extend(self.fields(contiguous(g.tape.value(logits)), xc.len())?);
            lats.extend(self.latents(contiguous(g.tape.value(y0)), xc.len())?);
        }
        Ok((fields, lats))
    }
}

impl LatentPredictor for NetworkPredictor<'_> {
    fn predict_latent(&mut self, yt: &[LatentState], t: usize) -> Result<Vec<LatentState>> {
        let (b, d) = (self.model.latent_blocks(), self.model.latent_dim());
        let mut out = Vec::with_capacity(yt.len());
        for yc in yt.chunks(self.chunk) {
            let t_norm = vec![t as f64 / self.latent_steps as f64; yc.len()];
            let mut g = Graph::<f32>::eval(self.store);
            let y = g.input_vec(yc.len() * b, d, &Self::flat_latents(yc))?;
            let y0 = self.model.seq_latent(&mut g, y, &t_norm)?;
            out.extend(self.latents(contiguous(g.tape.value(y0)), yc.len())?);
        }
        Ok(out)
    }
}

impl ConditionalPredictor for NetworkPredictor<'_> {
    fn predict_given(&mut self, xt: &[TokenSequence], y0: &[LatentState]) -> Result<Vec<CategoricalField>> {
        ensure!(xt.len() == y0.len(), LddmError::ShapeMismatch("token and latent batch sizes differ".into()));
        let (b, d) = (self.model.latent_blocks(), self.model.latent_dim());
        let mut out = Vec::with_capacity(xt.len());
        for (xc, yc) in xt.chunks(self.chunk).zip(y0.chunks(self.chunk)) {
            let tokens = flatten_tokens(xc, self.model.seq_len())?;
            let mut g = Graph::<f32>::eval(self.store);
            let y = g.input_vec(xc.len() * b, d, &Self::flat_latents(yc))?;
            let logits = self.model.seq_data_logits(&mut g, &tokens, y, xc.len())?;
            out.extend(self.fields(contiguous(g.tape.value(logits)), xc.len())?);
        }
        Ok(out)
    }
}
