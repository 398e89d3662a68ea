use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{
    BackboneConfig, Dit, Graph, LatentInput, LatentMlp, MmDit, MmDitHeads, ParameterStore, Real, Var,
};
use crate::discrete::TokenSequence;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{ensure, invalid, LddmError, Result};
use crate::rng::{fill_normal, label, StreamKey};
use crate::schedules::{continuous_weight, discrete_weight, ContinuousSchedule, MaskSchedule, WeightMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    Mdlm,
    Fuji,
    Seq,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 3] = [ModelFamily::Mdlm, ModelFamily::Fuji, ModelFamily::Seq];

    pub fn has_latents(self) -> bool {
        self != ModelFamily::Mdlm
    }
}

impl FromStr for ModelFamily {
    type Err = LddmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mdlm" => Ok(ModelFamily::Mdlm),
            "fuji" => Ok(ModelFamily::Fuji),
            "seq" => Ok(ModelFamily::Seq),
            _ => Err(invalid!("unknown model family `{s}` (expected mdlm, fuji or seq)")),
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Mdlm => "mdlm",
            ModelFamily::Fuji => "fuji",
            ModelFamily::Seq => "seq",
        })
    }
}

/// Both noise schedules of a run.
#[derive(Clone, Debug)]
pub struct Schedules {
    pub mask: MaskSchedule,
    pub latent: ContinuousSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Weighting {
    pub data: WeightMode,
    pub latent: WeightMode,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting { data: WeightMode::Elbo, latent: WeightMode::Unit }
    }
}

/// `total = data_term + lambda_latent * latent_term`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub data_term: f64,
    pub latent_term: f64,
    pub total: f64,
    pub lambda_latent: f64,
    /// Log-probabilities clamped at the floor in this evaluation.
    pub floored: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    /// Data (or joint) denoiser. `latent_blocks` and `latent_dim` fix the
    /// latent shape for all networks.
    pub backbone: BackboneConfig,
    pub encoder: BackboneConfig,
    pub sigma_lat_sq: f64,
    pub latent_depth: usize,
}

#[derive(Clone, Debug)]
enum Networks {
    Mdlm { den: Dit },
    Fuji { den: MmDit, enc: Encoder },
    Seq { data: MmDit, latent: LatentMlp, enc: Encoder },
}

/// The networks of one model family, sharing a single [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct LddmModel {
    spec: ModelSpec,
    nets: Networks,
}

impl LddmModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let bb = spec.backbone.clone();
        bb.validate()?;
        let encoder = || -> Result<Encoder> {
            let mut eb = spec.encoder.clone();
            ensure!(
                eb.vocab == bb.vocab && eb.seq_len == bb.seq_len,
                invalid!("encoder and denoiser disagree on vocabulary or sequence length")
            );
            eb.latent_blocks = bb.latent_blocks;
            eb.latent_dim = bb.latent_dim;
            Encoder::new(EncoderConfig::new(spec.sigma_lat_sq, eb)?)
        };
        let nets = match spec.family {
            ModelFamily::Mdlm => Networks::Mdlm { den: Dit::new(bb, "den.")? },
            ModelFamily::Fuji => {
                let mut jb = bb.clone();
                jb.time_conditioned = true;
                Networks::Fuji {
                    den: MmDit::new(jb, "den.", LatentInput::Projected, MmDitHeads::BOTH)?,
                    enc: encoder()?,
                }
            }
            ModelFamily::Seq => {
                let mut db = bb.clone();
                db.time_conditioned = false;
                let mut lb = bb.clone();
                lb.time_conditioned = true;
                let mut latent = LatentMlp::new(lb, "lat.")?;
                ensure!(spec.latent_depth >= 1, invalid!("latent denoiser depth must be positive"));
                latent.depth = spec.latent_depth;
                Networks::Seq {
                    data: MmDit::new(db, "data.", LatentInput::Projected, MmDitHeads::TOKENS)?,
                    latent,
                    enc: encoder()?,
                }
            }
        };
        Ok(LddmModel { spec, nets })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn family(&self) -> ModelFamily {
        self.spec.family
    }

    pub fn seq_len(&self) -> usize {
        self.spec.backbone.seq_len
    }

    pub fn vocab(&self) -> usize {
        self.spec.backbone.vocab
    }

    pub fn latent_blocks(&self) -> usize {
        self.spec.backbone.latent_blocks
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.backbone.latent_dim
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.nets {
            Networks::Mdlm { .. } => None,
            Networks::Fuji { enc, .. } | Networks::Seq { enc, .. } => Some(enc),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        match &self.nets {
            Networks::Mdlm { den } => den.init(store, rng),
            Networks::Fuji { den, enc } => {
                den.init(store, rng)?;
                enc.init(store, rng)
            }
            Networks::Seq { data, latent, enc } => {
                data.init(store, rng)?;
                latent.init(store, rng)?;
                enc.init(store, rng)
            }
        }
    }

    pub fn init_store(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        self.init(&mut store, &mut StreamKey::root(seed).fork(label::INIT).rng())?;
        Ok(store)
    }

    /// Logits `[n * S, K - 1]` from the data-only network.
    pub(crate) fn mdlm_logits<F: Real>(&self, g: &mut Graph<'_, F>, xt: &[u32], t_norm: &[f64]) -> Result<Var> {
        match &self.nets {
            Networks::Mdlm { den } => den.forward(g, xt, t_norm),
            _ => Err(self.wrong_family("mdlm")),
        }
    }

    pub(crate) fn fuji_outputs<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        xt: &[u32],
        yt: Var,
        t_norm: &[f64],
    ) -> Result<(Var, Var)> {
        match &self.nets {
            Networks::Fuji { den, .. } => {
                let out = den.forward(g, xt, Some(yt), t_norm)?;
                let missing = || LddmError::Internal("joint network head missing".into());
                Ok((out.logits.ok_or_else(missing)?, out.latents.ok_or_else(missing)?))
            }
            _ => Err(self.wrong_family("fuji")),
        }
    }

    pub(crate) fn seq_data_logits<F: Real>(&self, g: &mut Graph<'_, F>, xt: &[u32], y0: Var, batch: usize) -> Result<Var> {
        match &self.nets {
            Networks::Seq { data, .. } => data
                .forward(g, xt, Some(y0), &vec![0.0; batch])?
                .logits
                .ok_or_else(|| LddmError::Internal("data head missing".into())),
            _ => Err(self.wrong_family("seq")),
        }
    }

    pub(crate) fn seq_latent<F: Real>(&self, g: &mut Graph<'_, F>, yt: Var, t_norm: &[f64]) -> Result<Var> {
        match &self.nets {
            Networks::Seq { latent, .. } => latent.forward(g, yt, t_norm),
            _ => Err(self.wrong_family("seq")),
        }
    }

    fn wrong_family(&self, want: &str) -> LddmError {
        invalid!("operation needs a {want} model, this one is {}", self.spec.family)
    }

    /// Family loss on a batch of clean rows `x0` (`[n * S]`). Returns the
    /// differentiable total and its breakdown. All randomness comes from
    /// sub-streams of `key`.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x0: &[u32],
        sch: &Schedules,
        weighting: Weighting,
        lambda_latent: f64,
        key: StreamKey,
    ) -> Result<(Var, LossBreakdown)> {
        ensure!(
            (0.0..=1.0).contains(&lambda_latent),
            invalid!("lambda_latent {lambda_latent} outside [0, 1]")
        );
        let (s, k) = (self.seq_len(), self.vocab());
        ensure!(
            !x0.is_empty() && x0.len().is_multiple_of(s),
            LddmError::ShapeMismatch(format!("{} tokens is not a whole number of rows of {s}", x0.len()))
        );
        let n = x0.len() / s;
        let t_max = sch.mask.steps();
        let mut trng = key.fork(label::TIME).rng();
        let tx: Vec<usize> = (0..n).map(|_| trng.random_range(1..=t_max)).collect();
        let (xt, dweights) = masked_batch(x0, s, k, &tx, sch, weighting.data, key)?;
        let targets = x0.to_vec();
        let floored_before = g.tape.floored_count();

        let (data, latent) = match &self.nets {
            Networks::Mdlm { .. } => {
                let t_norm = normalized(&tx, t_max);
                let logits = self.mdlm_logits(g, &xt, &t_norm)?;
                (g.tape.weighted_log_prob(logits, &targets, &dweights)?, None)
            }
            Networks::Fuji { enc, .. } => {
                ensure!(
                    sch.latent.steps() == t_max,
                    invalid!("joint training needs equal step counts on both channels")
                );
                let y0 = self.encode_in_graph(g, enc, x0, n, key)?;
                let yt = self.noised(g, y0, &tx, &sch.latent, key.fork(label::GAUSS))?;
                let t_norm = normalized(&tx, t_max);
                let (logits, y_pred) = self.fuji_outputs(g, &xt, yt, &t_norm)?;
                let data = g.tape.weighted_log_prob(logits, &targets, &dweights)?;
                let lw = latent_weights(&tx, &sch.latent, weighting.latent, self.latent_blocks(), n)?;
                (data, Some(g.tape.weighted_sq_err(y_pred, y0, &lw)?))
            }
            Networks::Seq { enc, .. } => {
                let y0 = self.encode_in_graph(g, enc, x0, n, key)?;
                let logits = self.seq_data_logits(g, &xt, y0, n)?;
                let data = g.tape.weighted_log_prob(logits, &targets, &dweights)?;
                let lt_max = sch.latent.steps();
                let mut lrng = key.fork(label::TIME_LATENT).rng();
                let ty: Vec<usize> = (0..n).map(|_| lrng.random_range(1..=lt_max)).collect();
                let yt = self.noised(g, y0, &ty, &sch.latent, key.fork(label::GAUSS))?;
                let y_pred = self.seq_latent(g, yt, &normalized(&ty, lt_max))?;
                let lw = latent_weights(&ty, &sch.latent, weighting.latent, self.latent_blocks(), n)?;
                (data, Some(g.tape.weighted_sq_err(y_pred, y0, &lw)?))
            }
        };

        let data_term = g.tape.scalar(data).f64();
        let (total, latent_term) = match latent {
            Some(l) => {
                let scaled = g.tape.scale(l, lambda_latent);
                (g.tape.add(data, scaled)?, g.tape.scalar(l).f64())
            }
            None => (data, 0.0),
        };
        let breakdown = LossBreakdown {
            data_term,
            latent_term,
            total: g.tape.scalar(total).f64(),
            lambda_latent,
            floored: g.tape.floored_count() - floored_before,
        };
        Ok((total, breakdown))
    }

    fn encode_in_graph<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &Encoder,
        x0: &[u32],
        n: usize,
        key: StreamKey,
    ) -> Result<Var> {
        let mut noise = vec![0.0; n * self.latent_blocks() * self.latent_dim()];
        fill_normal(&mut key.fork(label::ENCODER).rng(), &mut noise);
        enc.forward(g, x0, n, &noise)
    }

    /// `alpha_bar[t_i] y0 + sigma_bar[t_i] eps` per batch element.
    fn noised<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        y0: Var,
        t: &[usize],
        cs: &ContinuousSchedule,
        key: StreamKey,
    ) -> Result<Var> {
        let (rows, cols) = g.tape.shape(y0);
        let per = rows / t.len();
        let mut eps = vec![0.0; rows * cols];
        fill_normal(&mut key.rng(), &mut eps);
        for (r, row) in eps.chunks_mut(cols).enumerate() {
            let sd = cs.sigma_bar(t[r / per]);
            row.iter_mut().for_each(|e| *e *= sd);
        }
        let alphas: Vec<f64> = t.iter().map(|&ti| cs.alpha_bar(ti)).collect();
        let scaled = g.tape.scale_groups(y0, &alphas)?;
        let noise = g.input_vec(rows, cols, &eps)?;
        g.tape.add(scaled, noise)
    }
}

fn normalized(t: &[usize], t_max: usize) -> Vec<f64> {
    t.iter().map(|&v| v as f64 / t_max as f64).collect()
}

/// Masked inputs and per-row log-prob weights. Weights are scaled by `T / S`
/// and averaged over the batch so the data term estimates the per-token NELBO.
fn masked_batch(
    x0: &[u32],
    s: usize,
    k: usize,
    t: &[usize],
    sch: &Schedules,
    mode: WeightMode,
    key: StreamKey,
) -> Result<(Vec<u32>, Vec<f64>)> {
    let n = t.len();
    let t_max = sch.mask.steps();
    let scale = t_max as f64 / (s as f64 * n as f64);
    let mut mrng = key.fork(label::MASK).rng();
    let mut xt = Vec::with_capacity(x0.len());
    let mut weights = vec![0.0; x0.len()];
    for (i, row) in x0.chunks(s).enumerate() {
        let seq = TokenSequence::new(row.to_vec(), k)?;
        let noisy = crate::discrete::mask_forward_sample(&seq, t[i], &sch.mask, &mut mrng)?;
        let mut w = None;
        for (j, &tok) in noisy.tokens().iter().enumerate() {
            if tok == noisy.mask_id() {
                let wt = match w {
                    Some(v) => v,
                    None => {
                        let v = discrete_weight(&sch.mask, t[i], mode)? * scale;
                        w = Some(v);
                        v
                    }
                };
                weights[i * s + j] = wt;
            }
        }
        xt.extend_from_slice(noisy.tokens());
    }
    Ok((xt, weights))
}

/// Per-latent-row weights averaged over the batch. Under ELBO weighting the
/// `t = 1` reconstruction term is dropped (its weight is undefined).
fn latent_weights(t: &[usize], cs: &ContinuousSchedule, mode: WeightMode, blocks: usize, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n * blocks);
    for &ti in t {
        let w = if mode == WeightMode::Elbo && ti == 1 {
            0.0
        } else {
            continuous_weight(cs, ti, mode)?
        };
        out.extend(std::iter::repeat_n(w / n as f64, blocks));
    }
    Ok(out)
}

/// Differentiable MDLM loss.
pub fn mdlm_loss<F: Real>(
    g: &mut Graph<'_, F>,
    model: &LddmModel,
    x0: &[u32],
    sch: &Schedules,
    mode: WeightMode,
    key: StreamKey,
) -> Result<(Var, LossBreakdown)> {
    ensure!(model.family() == ModelFamily::Mdlm, model.wrong_family("mdlm"));
    model.loss(g, x0, sch, Weighting { data: mode, latent: WeightMode::Unit }, 0.0, key)
}

/// Differentiable FUJI loss: one shared `t` per element on both channels.
pub fn fuji_loss<F: Real>(
    g: &mut Graph<'_, F>,
    model: &LddmModel,
    x0: &[u32],
    sch: &Schedules,
    weighting: Weighting,
    lambda_latent: f64,
    key: StreamKey,
) -> Result<(Var, LossBreakdown)> {
    ensure!(model.family() == ModelFamily::Fuji, model.wrong_family("fuji"));
    model.loss(g, x0, sch, weighting, lambda_latent, key)
}

/// Differentiable SEQ loss: independent `t` per channel.
pub fn seq_loss<F: Real>(
    g: &mut Graph<'_, F>,
    model: &LddmModel,
    x0: &[u32],
    sch: &Schedules,
    weighting: Weighting,
    lambda_latent: f64,
    key: StreamKey,
) -> Result<(Var, LossBreakdown)> {
    ensure!(model.family() == ModelFamily::Seq, model.wrong_family("seq"));
    model.loss(g, x0, sch, weighting, lambda_latent, key)
}
