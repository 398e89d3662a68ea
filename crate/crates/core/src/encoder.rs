//! Gaussian encoder from clean token sequences to unit-norm latent blocks.

use rand::Rng;

use crate::backbone::{BackboneConfig, INIT_STD, Graph, LatentInput, MmDit, MmDitHeads, ParameterStore, Real, Var};
use crate::continuous::LatentState;
use crate::discrete::TokenSequence;
use crate::error::{ensure, invalid, LddmError, Result};
use crate::rng::fill_normal;

pub const DEFAULT_SIGMA_LAT_SQ: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub sigma_lat_sq: f64,
    /// `latent_blocks` and `latent_dim` of this config fix the latent shape.
    pub backbone: BackboneConfig,
}

impl EncoderConfig {
    pub fn new(sigma_lat_sq: f64, backbone: BackboneConfig) -> Result<Self> {
        ensure!(
            sigma_lat_sq > 0.0 && sigma_lat_sq.is_finite(),
            invalid!("encoder variance must be positive, got {sigma_lat_sq}")
        );
        backbone.validate()?;
        ensure!(backbone.latent_dim >= 1, invalid!("encoder needs a positive latent dimension"));
        Ok(EncoderConfig { sigma_lat_sq, backbone })
    }

    pub fn sigma_lat(&self) -> f64 {
        self.sigma_lat_sq.sqrt()
    }
}

/// Scale every block to unit Euclidean norm.
pub fn unit_normalize_blocks(y: &LatentState) -> Result<LatentState> {
    let mut out = Vec::with_capacity(y.len());
    for (i, n) in y.block_norms().into_iter().enumerate() {
        if !(n > 0.0) {
            return Err(LddmError::DegenerateInput(format!("latent block {i} has zero norm")));
        }
        out.extend(y.block(i).iter().map(|v| v / n));
    }
    LatentState::new(out, y.blocks(), y.dim())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    net: MmDit,
}

impl Encoder {
    pub const PREFIX: &'static str = "enc.";

    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        let mut bb = cfg.backbone.clone();
        bb.time_conditioned = false;
        let net = MmDit::new(bb, Self::PREFIX, LatentInput::LearnedSlots, MmDitHeads::LATENTS)?;
        Ok(Encoder { cfg, net })
    }

    pub fn latent_blocks(&self) -> usize {
        self.cfg.backbone.latent_blocks
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.backbone.latent_dim
    }

    /// The latent head starts random: a zero head would give zero means,
    /// which cannot be normalized.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.net.init(store, rng)?;
        store.reset_normal(&format!("{}final.y.head.w", Self::PREFIX), INIT_STD, rng)
    }

    /// Differentiable encoding of `batch` clean rows. `noise` holds one
    /// standard normal per latent coordinate, `[batch * S', d']` row-major.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, tokens: &[u32], batch: usize, noise: &[f64]) -> Result<Var> {
        let mask = self.cfg.backbone.mask_id();
        if tokens.contains(&mask) {
            return Err(invalid!("encoder input contains mask tokens"));
        }
        let out = self.net.forward(g, tokens, None, &vec![0.0; batch])?;
        let mean = out.latents.ok_or_else(|| LddmError::Internal("encoder produced no latents".into()))?;
        let mean = g.tape.row_normalize(mean)?;
        let (rows, cols) = g.tape.shape(mean);
        ensure!(
            noise.len() == rows * cols,
            LddmError::ShapeMismatch(format!("{} noise values for {rows}x{cols} latents", noise.len()))
        );
        let sigma = self.cfg.sigma_lat();
        let scaled: Vec<f64> = noise.iter().map(|e| sigma * e).collect();
        let eps = g.input_vec(rows, cols, &scaled)?;
        let sample = g.tape.add(mean, eps)?;
        g.tape.row_normalize(sample)
    }

    /// Encode a batch of clean sequences outside of training.
    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        x0: &[TokenSequence],
        rng: &mut R,
    ) -> Result<Vec<LatentState>> {
        let (sb, d) = (self.latent_blocks(), self.latent_dim());
        let mut noise = vec![0.0; x0.len() * sb * d];
        fill_normal(rng, &mut noise);
        let mut out = Vec::with_capacity(x0.len());
        for (chunk, nchunk) in x0.chunks(ENCODE_CHUNK).zip(noise.chunks(ENCODE_CHUNK * sb * d)) {
            let tokens = flatten_tokens(chunk, self.cfg.backbone.seq_len)?;
            let mut g = Graph::<f64>::eval(store);
            let v = self.forward(&mut g, &tokens, chunk.len(), nchunk)?;
            let vals = g.tape.value(v);
            for row in vals.as_slice().expect("tape values are contiguous").chunks(sb * d) {
                out.push(LatentState::new(row.to_vec(), sb, d)?);
            }
        }
        Ok(out)
    }

    pub fn encode<R: Rng + ?Sized>(&self, store: &ParameterStore, x0: &TokenSequence, rng: &mut R) -> Result<LatentState> {
        Ok(self.encode_batch(store, std::slice::from_ref(x0), rng)?.remove(0))
    }
}

const ENCODE_CHUNK: usize = 256;

pub(crate) fn flatten_tokens(seqs: &[TokenSequence], seq_len: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        ensure!(
            s.len() == seq_len,
            LddmError::ShapeMismatch(format!("sequence of length {}, expected {seq_len}", s.len()))
        );
        out.extend_from_slice(s.tokens());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn cfg(sigma_lat_sq: f64) -> EncoderConfig {
        let bb = BackboneConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            dropout: 0.0,
            vocab: 3,
            seq_len: 6,
            latent_blocks: 2,
            latent_dim: 4,
            time_conditioned: false,
        };
        EncoderConfig::new(sigma_lat_sq, bb).unwrap()
    }

    fn setup(sigma_lat_sq: f64) -> (Encoder, ParameterStore) {
        let enc = Encoder::new(cfg(sigma_lat_sq)).unwrap();
        let mut store = ParameterStore::new();
        enc.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
        // Zero-initialized heads would give all-zero means; perturb everything.
        let mut rng = StreamKey::root(2).rng();
        for (_, p) in store.iter_mut() {
            p.mapv_inplace(|v| v + 0.2 * crate::rng::normal(&mut rng));
        }
        (enc, store)
    }

    #[test]
    fn normalize_examples() {
        let y = LatentState::new(vec![3.0, 4.0], 1, 2).unwrap();
        assert_eq!(unit_normalize_blocks(&y).unwrap().data(), &[0.6, 0.8]);
        let unit = LatentState::new(vec![0.6, 0.8, 1.0, 0.0], 2, 2).unwrap();
        let again = unit_normalize_blocks(&unit).unwrap();
        for (a, b) in again.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let zero = LatentState::new(vec![1.0, 0.0, 0.0, 0.0], 2, 2).unwrap();
        assert!(matches!(unit_normalize_blocks(&zero), Err(LddmError::DegenerateInput(_))));
        let mut rng = StreamKey::root(3).rng();
        let r = LatentState::standard_normal(50, 7, 3.0, &mut rng);
        for n in unit_normalize_blocks(&r).unwrap().block_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_outputs_unit_blocks_and_small_noise() {
        let (enc, store) = setup(1e-4);
        let x0 = TokenSequence::new(vec![0, 1, 1, 0, 1, 0], 3).unwrap();
        let mut max_diff = 0.0f64;
        for trial in 0..1000u64 {
            let a = enc.encode(&store, &x0, &mut StreamKey::root(10).fork(trial).rng()).unwrap();
            let b = enc.encode(&store, &x0, &mut StreamKey::root(11).fork(trial).rng()).unwrap();
            for n in a.block_norms() {
                assert!((n - 1.0).abs() < 1e-6);
            }
            for (p, q) in a.data().iter().zip(b.data()) {
                max_diff = max_diff.max((p - q).abs());
            }
        }
        assert!(max_diff > 0.0 && max_diff < 10.0 * 1e-4f64.sqrt(), "max diff {max_diff}");
    }

    #[test]
    fn vanishing_noise_gives_normalized_mean() {
        let (enc, store) = setup(1e-300);
        let x0 = TokenSequence::new(vec![1, 1, 0, 0, 1, 0], 3).unwrap();
        let a = enc.encode(&store, &x0, &mut StreamKey::root(1).rng()).unwrap();
        let b = enc.encode(&store, &x0, &mut StreamKey::root(2).rng()).unwrap();
        let mut g = Graph::<f64>::eval(&store);
        let v = enc.forward(&mut g, x0.tokens(), 1, &[0.0; 8]).unwrap();
        let mean = g.tape.value(v).iter().copied().collect::<Vec<_>>();
        assert_eq!(a.data(), mean.as_slice());
        assert_eq!(a, b);
        assert!(EncoderConfig::new(0.0, cfg(1e-4).backbone).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_rejects_masks() {
        let (enc, store) = setup(1e-4);
        let x0 = TokenSequence::new(vec![0, 1, 0, 1, 0, 1], 3).unwrap();
        let a = enc.encode(&store, &x0, &mut StreamKey::root(5).rng()).unwrap();
        let b = enc.encode(&store, &x0, &mut StreamKey::root(5).rng()).unwrap();
        assert_eq!(a, b);
        let masked = TokenSequence::new(vec![0, 2, 0, 1, 0, 1], 3).unwrap();
        assert!(enc.encode(&store, &masked, &mut StreamKey::root(5).rng()).is_err());
    }
}
