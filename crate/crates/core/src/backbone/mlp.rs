use rand::Rng;

use super::graph::Graph;
use super::layers::{check_finite, conditioning, init_conditioning, init_linear, linear};
use super::params::ParameterStore;
use super::tape::{Real, Var};
use super::BackboneConfig;
use crate::error::{LddmError, Result};

/// Residual MLP denoiser over latent blocks (no attention). Each block of
/// `latent_dim` values is processed independently with shared weights.
#[derive(Clone, Debug)]
pub struct LatentMlp {
    pub cfg: BackboneConfig,
    pub prefix: String,
    pub depth: usize,
}

impl LatentMlp {
    pub const DEFAULT_DEPTH: usize = 3;

    pub fn new(cfg: BackboneConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(LatentMlp { cfg, prefix: prefix.into(), depth: Self::DEFAULT_DEPTH })
    }

    fn p(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        init_linear(store, &self.p("in"), c.latent_dim, c.hidden, false, rng)?;
        init_conditioning(store, &self.p("cond"), c.hidden, c.time_conditioned, rng)?;
        for l in 0..self.depth {
            init_linear(store, &self.p(&format!("blocks.{l}.cond")), c.hidden, c.hidden, false, rng)?;
            init_linear(store, &self.p(&format!("blocks.{l}.fc")), c.hidden, c.hidden, false, rng)?;
        }
        init_linear(store, &self.p("head"), c.hidden, c.latent_dim, true, rng)
    }

    /// `latents`: `[batch * latent_blocks, latent_dim]`. Returns the predicted
    /// clean latent with the same shape.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, latents: Var, t_norm: &[f64]) -> Result<Var> {
        let c = &self.cfg;
        let expect = (t_norm.len() * c.latent_blocks, c.latent_dim);
        if g.tape.shape(latents) != expect {
            return Err(LddmError::ShapeMismatch(format!(
                "latents {:?}, expected {expect:?}",
                g.tape.shape(latents)
            )));
        }
        let mut h = linear(g, &self.p("in"), latents)?;
        let cond = conditioning(g, &self.p("cond"), c.hidden, c.time_conditioned, t_norm)?;
        let cond = g.tape.silu(cond);
        h = g.tape.add_groups(h, cond)?;
        for l in 0..self.depth {
            let cl = linear(g, &self.p(&format!("blocks.{l}.cond")), cond)?;
            let u = g.tape.layer_norm(h);
            let u = g.tape.add_groups(u, cl)?;
            let u = g.tape.silu(u);
            let u = linear(g, &self.p(&format!("blocks.{l}.fc")), u)?;
            let u = g.dropout(u, c.dropout);
            h = g.tape.add(h, u)?;
        }
        let u = g.tape.layer_norm(h);
        let u = g.tape.silu(u);
        let out = linear(g, &self.p("head"), u)?;
        check_finite(g, out, "latent mlp")?;
        Ok(out)
    }
}
