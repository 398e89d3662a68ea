use ndarray::Array2;
use rand::Rng;

use super::graph::Graph;
use super::layers::{
    block_post_attention, block_pre_attention, check_finite, check_tokens, conditioning, final_layer,
    init_block, init_conditioning, init_final, init_linear, linear,
};
use super::params::ParameterStore;
use super::tape::{Real, Var};
use super::{BackboneConfig, INIT_STD};
use crate::error::{LddmError, Result};

/// How the latent stream is fed into the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentInput {
    /// Noisy latent blocks projected from `latent_dim` to the hidden width.
    Projected,
    /// `latent_blocks` learned embeddings; no latent input (encoder use).
    LearnedSlots,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MmDitHeads {
    pub tokens: bool,
    pub latents: bool,
}

impl MmDitHeads {
    pub const BOTH: MmDitHeads = MmDitHeads { tokens: true, latents: true };
    pub const TOKENS: MmDitHeads = MmDitHeads { tokens: true, latents: false };
    pub const LATENTS: MmDitHeads = MmDitHeads { tokens: false, latents: true };
}

pub struct MmDitOutput {
    /// `[batch * seq_len, vocab - 1]`
    pub logits: Option<Var>,
    /// `[batch * latent_blocks, latent_dim]`
    pub latents: Option<Var>,
}

/// Two-stream transformer: token rows and latent-block rows attend jointly in
/// every layer; embeddings, conditioning, norms, MLPs and heads are per stream.
#[derive(Clone, Debug)]
pub struct MmDit {
    pub cfg: BackboneConfig,
    pub prefix: String,
    pub latent_input: LatentInput,
    pub heads: MmDitHeads,
}

impl MmDit {
    pub fn new(
        cfg: BackboneConfig,
        prefix: impl Into<String>,
        latent_input: LatentInput,
        heads: MmDitHeads,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.latent_blocks == 0 {
            return Err(LddmError::InvalidArgument("joint network needs at least one latent block".into()));
        }
        Ok(MmDit { cfg, prefix: prefix.into(), latent_input, heads })
    }

    fn p(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        store.init_normal(self.p("x.tok_emb"), c.vocab, c.hidden, INIT_STD, rng)?;
        store.init_normal(self.p("x.pos_emb"), c.seq_len, c.hidden, INIT_STD, rng)?;
        match self.latent_input {
            LatentInput::Projected => {
                init_linear(store, &self.p("y.in"), c.latent_dim, c.hidden, false, rng)?;
                store.init_normal(self.p("y.pos_emb"), c.latent_blocks, c.hidden, INIT_STD, rng)?;
            }
            LatentInput::LearnedSlots => {
                store.init_normal(self.p("y.slots"), c.latent_blocks, c.hidden, INIT_STD, rng)?;
            }
        }
        init_conditioning(store, &self.p("x.cond"), c.hidden, c.time_conditioned, rng)?;
        init_conditioning(store, &self.p("y.cond"), c.hidden, c.time_conditioned, rng)?;
        for l in 0..c.layers {
            init_block(store, &self.p(&format!("blocks.{l}.x")), c, rng)?;
            init_block(store, &self.p(&format!("blocks.{l}.y")), c, rng)?;
        }
        if self.heads.tokens {
            init_final(store, &self.p("final.x"), c.hidden, c.vocab - 1, rng)?;
        }
        if self.heads.latents {
            init_final(store, &self.p("final.y"), c.hidden, c.latent_dim, rng)?;
        }
        Ok(())
    }

    /// `latents` is `[batch * latent_blocks * latent_dim]` row-major and is
    /// required for [`LatentInput::Projected`].
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[u32],
        latents: Option<Var>,
        t_norm: &[f64],
    ) -> Result<MmDitOutput> {
        let c = &self.cfg;
        let batch = t_norm.len();
        check_tokens(tokens, batch, c.seq_len, c.vocab)?;
        let emb = g.param(&self.p("x.tok_emb"))?;
        let pos = g.param(&self.p("x.pos_emb"))?;
        let x = g.tape.embed(emb, tokens)?;
        let mut x = g.tape.add_tiled(x, pos)?;

        let mut y = match self.latent_input {
            LatentInput::Projected => {
                let lat = latents.ok_or_else(|| LddmError::InvalidArgument("latent input required".into()))?;
                let expect = (batch * c.latent_blocks, c.latent_dim);
                if g.tape.shape(lat) != expect {
                    return Err(LddmError::ShapeMismatch(format!(
                        "latents {:?}, expected {expect:?}",
                        g.tape.shape(lat)
                    )));
                }
                let h = linear(g, &self.p("y.in"), lat)?;
                let lp = g.param(&self.p("y.pos_emb"))?;
                g.tape.add_tiled(h, lp)?
            }
            LatentInput::LearnedSlots => {
                let slots = g.param(&self.p("y.slots"))?;
                let zeros = g.input(Array2::zeros((batch * c.latent_blocks, c.hidden)));
                g.tape.add_tiled(zeros, slots)?
            }
        };

        let cx = conditioning(g, &self.p("x.cond"), c.hidden, c.time_conditioned, t_norm)?;
        let cx = g.tape.silu(cx);
        let cy = conditioning(g, &self.p("y.cond"), c.hidden, c.time_conditioned, t_norm)?;
        let cy = g.tape.silu(cy);
        let joint = c.seq_len + c.latent_blocks;
        for l in 0..c.layers {
            let px = self.p(&format!("blocks.{l}.x"));
            let py = self.p(&format!("blocks.{l}.y"));
            let sx = block_pre_attention(g, &px, c.hidden, x, cx)?;
            let sy = block_pre_attention(g, &py, c.hidden, y, cy)?;
            let qkv = g.tape.concat_groups(sx.qkv, sy.qkv, batch)?;
            let att = g.tape.attention(qkv, c.heads, joint)?;
            let last = l + 1 == c.layers;
            if !(last && !self.heads.tokens) {
                let ax = g.tape.slice_groups(att, batch, 0, c.seq_len)?;
                x = block_post_attention(g, &px, c.dropout, x, ax, &sx)?;
            }
            if !(last && !self.heads.latents) {
                let ay = g.tape.slice_groups(att, batch, c.seq_len, c.latent_blocks)?;
                y = block_post_attention(g, &py, c.dropout, y, ay, &sy)?;
            }
        }
        let logits = if self.heads.tokens {
            let v = final_layer(g, &self.p("final.x"), c.hidden, x, cx)?;
            check_finite(g, v, "mmdit token head")?;
            Some(v)
        } else {
            None
        };
        let latents = if self.heads.latents {
            let v = final_layer(g, &self.p("final.y"), c.hidden, y, cy)?;
            check_finite(g, v, "mmdit latent head")?;
            Some(v)
        } else {
            None
        };
        Ok(MmDitOutput { logits, latents })
    }
}
