use ndarray::Array2;
use rand::Rng;

use super::graph::Graph;
use super::params::ParameterStore;
use super::tape::{Real, Var};
use super::{BackboneConfig, INIT_STD};
use crate::error::{LddmError, Result};

/// Sinusoidal features of normalized times, one row per entry of `t_norm`.
/// Times are scaled by 1000 before embedding.
pub fn sinusoidal_embedding(t_norm: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((t_norm.len(), dim));
    for (r, &t) in t_norm.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = 1000.0 * t * freq;
            out[[r, i]] = arg.cos();
            out[[r, half + i]] = arg.sin();
        }
    }
    out
}

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<()> {
    if zero {
        store.init_zeros(format!("{prefix}.w"), fan_in, fan_out)?;
    } else {
        store.init_normal(format!("{prefix}.w"), fan_in, fan_out, INIT_STD, rng)?;
    }
    store.init_zeros(format!("{prefix}.b"), 1, fan_out)
}

pub(crate) fn linear<F: Real>(g: &mut Graph<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    g.tape.linear(x, w, b)
}

/// Conditioning vector per sequence: an MLP over sinusoidal time features, or
/// a learned constant when the network is not time-conditioned.
pub(crate) fn init_conditioning<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    hidden: usize,
    time_conditioned: bool,
    rng: &mut R,
) -> Result<()> {
    if time_conditioned {
        init_linear(store, &format!("{prefix}.fc1"), hidden, hidden, false, rng)?;
        init_linear(store, &format!("{prefix}.fc2"), hidden, hidden, false, rng)
    } else {
        store.init_normal(format!("{prefix}.const"), 1, hidden, INIT_STD, rng)
    }
}

pub(crate) fn conditioning<F: Real>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    hidden: usize,
    time_conditioned: bool,
    t_norm: &[f64],
) -> Result<Var> {
    if time_conditioned {
        let feats = g.input(sinusoidal_embedding(t_norm, hidden));
        let h = linear(g, &format!("{prefix}.fc1"), feats)?;
        let h = g.tape.silu(h);
        linear(g, &format!("{prefix}.fc2"), h)
    } else {
        let c = g.param(&format!("{prefix}.const"))?;
        let zeros = g.input(Array2::zeros((t_norm.len(), hidden)));
        g.tape.add_groups(zeros, c)
    }
}

/// Weights of one adaLN transformer block for a single stream.
pub(crate) fn init_block<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    let h = cfg.hidden;
    let m = cfg.hidden * cfg.mlp_ratio;
    init_linear(store, &format!("{prefix}.ada"), h, 6 * h, true, rng)?;
    init_linear(store, &format!("{prefix}.qkv"), h, 3 * h, false, rng)?;
    init_linear(store, &format!("{prefix}.proj"), h, h, false, rng)?;
    init_linear(store, &format!("{prefix}.fc1"), h, m, false, rng)?;
    init_linear(store, &format!("{prefix}.fc2"), m, h, false, rng)
}

/// Per-stream modulation produced before attention.
pub(crate) struct BlockState {
    pub qkv: Var,
    gate_attn: Var,
    shift_mlp: Var,
    scale_mlp: Var,
    gate_mlp: Var,
}

pub(crate) fn block_pre_attention<F: Real>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    hidden: usize,
    x: Var,
    cond_act: Var,
) -> Result<BlockState> {
    let m = linear(g, &format!("{prefix}.ada"), cond_act)?;
    let part = |g: &mut Graph<'_, F>, i: usize| g.tape.slice_cols(m, i * hidden, hidden);
    let shift_attn = part(g, 0)?;
    let scale_attn = part(g, 1)?;
    let gate_attn = part(g, 2)?;
    let shift_mlp = part(g, 3)?;
    let scale_mlp = part(g, 4)?;
    let gate_mlp = part(g, 5)?;
    let h = g.tape.layer_norm(x);
    let h = g.tape.modulate(h, shift_attn, scale_attn)?;
    let qkv = linear(g, &format!("{prefix}.qkv"), h)?;
    Ok(BlockState { qkv, gate_attn, shift_mlp, scale_mlp, gate_mlp })
}

pub(crate) fn block_post_attention<F: Real>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    dropout: f64,
    x: Var,
    attn: Var,
    st: &BlockState,
) -> Result<Var> {
    let a = linear(g, &format!("{prefix}.proj"), attn)?;
    let a = g.dropout(a, dropout);
    let a = g.tape.gate(a, st.gate_attn)?;
    let x = g.tape.add(x, a)?;
    let h = g.tape.layer_norm(x);
    let h = g.tape.modulate(h, st.shift_mlp, st.scale_mlp)?;
    let h = linear(g, &format!("{prefix}.fc1"), h)?;
    let h = g.tape.gelu(h);
    let h = linear(g, &format!("{prefix}.fc2"), h)?;
    let h = g.dropout(h, dropout);
    let h = g.tape.gate(h, st.gate_mlp)?;
    g.tape.add(x, h)
}

pub(crate) fn init_final<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    hidden: usize,
    out: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.ada"), hidden, 2 * hidden, true, rng)?;
    init_linear(store, &format!("{prefix}.head"), hidden, out, true, rng)
}

pub(crate) fn final_layer<F: Real>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    hidden: usize,
    x: Var,
    cond_act: Var,
) -> Result<Var> {
    let m = linear(g, &format!("{prefix}.ada"), cond_act)?;
    let shift = g.tape.slice_cols(m, 0, hidden)?;
    let scale = g.tape.slice_cols(m, hidden, hidden)?;
    let h = g.tape.layer_norm(x);
    let h = g.tape.modulate(h, shift, scale)?;
    linear(g, &format!("{prefix}.head"), h)
}

pub(crate) fn check_tokens(tokens: &[u32], batch: usize, seq_len: usize, vocab: usize) -> Result<()> {
    if tokens.len() != batch * seq_len {
        return Err(LddmError::ShapeMismatch(format!(
            "expected {batch} x {seq_len} tokens, got {}",
            tokens.len()
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(LddmError::InvalidArgument(format!("token {bad} outside vocabulary {vocab}")));
    }
    Ok(())
}

pub(crate) fn check_finite<F: Real>(g: &Graph<'_, F>, v: Var, what: &str) -> Result<()> {
    if g.tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LddmError::NumericalOverflow(format!("non-finite activation in {what}")))
    }
}

/// Single-stream adaLN transformer over token sequences. Produces logits over
/// the `vocab - 1` non-mask tokens.
#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: BackboneConfig,
    pub prefix: String,
}

impl Dit {
    pub fn new(cfg: BackboneConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Dit { cfg, prefix: prefix.into() })
    }

    fn p(&self, s: &str) -> String {
        format!("{}{s}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        store.init_normal(self.p("tok_emb"), c.vocab, c.hidden, INIT_STD, rng)?;
        store.init_normal(self.p("pos_emb"), c.seq_len, c.hidden, INIT_STD, rng)?;
        init_conditioning(store, &self.p("cond"), c.hidden, c.time_conditioned, rng)?;
        for l in 0..c.layers {
            init_block(store, &self.p(&format!("blocks.{l}")), c, rng)?;
        }
        init_final(store, &self.p("final"), c.hidden, c.vocab - 1, rng)
    }

    /// Logits `[batch * seq_len, vocab - 1]` for a batch of token rows.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, tokens: &[u32], t_norm: &[f64]) -> Result<Var> {
        let c = &self.cfg;
        let batch = t_norm.len();
        check_tokens(tokens, batch, c.seq_len, c.vocab)?;
        let emb = g.param(&self.p("tok_emb"))?;
        let pos = g.param(&self.p("pos_emb"))?;
        let x = g.tape.embed(emb, tokens)?;
        let mut x = g.tape.add_tiled(x, pos)?;
        let cond = conditioning(g, &self.p("cond"), c.hidden, c.time_conditioned, t_norm)?;
        let cond_act = g.tape.silu(cond);
        for l in 0..c.layers {
            let prefix = self.p(&format!("blocks.{l}"));
            let st = block_pre_attention(g, &prefix, c.hidden, x, cond_act)?;
            let att = g.tape.attention(st.qkv, c.heads, c.seq_len)?;
            x = block_post_attention(g, &prefix, c.dropout, x, att, &st)?;
        }
        let logits = final_layer(g, &self.p("final"), c.hidden, x, cond_act)?;
        check_finite(g, logits, "dit")?;
        Ok(logits)
    }
}
