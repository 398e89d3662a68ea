//! Masked forward noising, reverse bridges and the discrete NELBO term.

use rand::Rng;

use crate::error::{ensure, invalid, LddmError, Result};
use crate::schedules::{discrete_weight, MaskSchedule, WeightMode};

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// A length-`S` sequence over `{0, .., K-1}`; `K - 1` is the mask token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    vocab: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, vocab: usize) -> Result<Self> {
        ensure!(vocab >= 2, invalid!("vocabulary must include at least one token and the mask"));
        ensure!(!tokens.is_empty(), invalid!("empty token sequence"));
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(invalid!("token {t} outside vocabulary of size {vocab}"));
        }
        Ok(TokenSequence { tokens, vocab })
    }

    pub fn all_masked(len: usize, vocab: usize) -> Result<Self> {
        ensure!(vocab >= 2 && len >= 1, invalid!("bad all-mask shape {len}x{vocab}"));
        Ok(TokenSequence { tokens: vec![(vocab - 1) as u32; len], vocab })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id()
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id()).count()
    }
}

/// Per-position categorical distributions, `S x K`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalField {
    probs: Vec<f64>,
    seq_len: usize,
    vocab: usize,
}

impl CategoricalField {
    pub fn new(probs: Vec<f64>, seq_len: usize, vocab: usize) -> Result<Self> {
        ensure!(
            probs.len() == seq_len * vocab,
            LddmError::ShapeMismatch(format!("{} probabilities for {seq_len}x{vocab}", probs.len()))
        );
        for (i, row) in probs.chunks(vocab).enumerate() {
            let sum: f64 = row.iter().sum();
            ensure!(
                row.iter().all(|&p| p >= 0.0 && p.is_finite()) && (sum - 1.0).abs() < 1e-9,
                invalid!("row {i} is not a probability vector (sum {sum})")
            );
        }
        Ok(CategoricalField { probs, seq_len, vocab })
    }

    /// Softmax over `vocab - 1` logits per position; the mask column is exactly 0.
    pub fn from_logits(logits: &[f64], seq_len: usize, vocab: usize) -> Result<Self> {
        let k = vocab - 1;
        ensure!(
            logits.len() == seq_len * k,
            LddmError::ShapeMismatch(format!("{} logits for {seq_len}x{k}", logits.len()))
        );
        let mut probs = vec![0.0; seq_len * vocab];
        for (i, row) in logits.chunks(k).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(LddmError::NumericalOverflow(format!("non-finite logits at position {i}")));
            }
            let out = &mut probs[i * vocab..i * vocab + k];
            let mut tot = 0.0;
            for (o, &z) in out.iter_mut().zip(row) {
                *o = (z - mx).exp();
                tot += *o;
            }
            for o in out.iter_mut() {
                *o /= tot;
            }
        }
        Ok(CategoricalField { probs, seq_len, vocab })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Keep each token with probability `gamma_bar[t]`, otherwise mask it.
pub fn mask_forward_sample<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: usize,
    ms: &MaskSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    ensure!(t <= ms.steps(), invalid!("step {t} outside [0, {}]", ms.steps()));
    ensure!(x0.masked_count() == 0, invalid!("clean sequence contains mask tokens"));
    let keep = ms.gamma_bar(t);
    let mask = x0.mask_id();
    let tokens = x0
        .tokens()
        .iter()
        .map(|&tok| if rng.random::<f64>() < keep { tok } else { mask })
        .collect();
    Ok(TokenSequence { tokens, vocab: x0.vocab })
}

/// Distribution of `x_s^i` given `x_t^i` and a predicted clean distribution.
pub fn mask_bridge_distribution(
    xt_i: u32,
    x0_prob_i: &[f64],
    s: usize,
    t: usize,
    ms: &MaskSchedule,
) -> Result<Vec<f64>> {
    ensure!(s < t && t <= ms.steps(), invalid!("bridge needs s < t <= T, got s={s}, t={t}"));
    let vocab = x0_prob_i.len();
    ensure!(vocab >= 2, invalid!("distribution over fewer than two states"));
    let mask = vocab - 1;
    ensure!((xt_i as usize) < vocab, invalid!("token {xt_i} outside vocabulary {vocab}"));
    let mut out = vec![0.0; vocab];
    if xt_i as usize != mask {
        out[xt_i as usize] = 1.0;
        return Ok(out);
    }
    let (gs, gt) = (ms.gamma_bar(s), ms.gamma_bar(t));
    if gt >= 1.0 {
        return Err(LddmError::DegenerateSchedule(format!("gamma_bar[{t}] = 1")));
    }
    let denom = 1.0 - gt;
    for (o, &p) in out.iter_mut().zip(x0_prob_i) {
        *o = (gs - gt) * p / denom;
    }
    out[mask] += (1.0 - gs) / denom;
    Ok(out)
}

/// Inverse-CDF draw from `probs` with a single uniform.
pub fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// One reverse step `t -> s`. Draws one uniform per position; unmasked
/// positions are copied unchanged.
pub fn mask_reverse_step<R: Rng + ?Sized>(
    xt: &TokenSequence,
    x0_probs: &CategoricalField,
    s: usize,
    t: usize,
    ms: &MaskSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    ensure!(
        x0_probs.seq_len() == xt.len() && x0_probs.vocab() == xt.vocab(),
        LddmError::ShapeMismatch("prediction does not match sequence shape".into())
    );
    let mut tokens = Vec::with_capacity(xt.len());
    for (i, &tok) in xt.tokens().iter().enumerate() {
        let u: f64 = rng.random();
        if tok != xt.mask_id() {
            tokens.push(tok);
            continue;
        }
        let dist = mask_bridge_distribution(tok, x0_probs.row(i), s, t, ms)?;
        tokens.push(inverse_cdf(&dist, u) as u32);
    }
    Ok(TokenSequence { tokens, vocab: xt.vocab })
}

/// Value of one discrete NELBO term and how many log-probabilities were floored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NelboTerm {
    pub value: f64,
    pub floored: usize,
}

/// `sum over masked i of w_t * ln <x0_probs_i, onehot(x0_i)>`.
pub fn mask_nelbo_term(
    x0: &TokenSequence,
    xt: &TokenSequence,
    x0_probs: &CategoricalField,
    t: usize,
    ms: &MaskSchedule,
    mode: WeightMode,
) -> Result<NelboTerm> {
    ensure!(
        x0.len() == xt.len() && x0.vocab() == xt.vocab() && x0_probs.seq_len() == x0.len(),
        LddmError::ShapeMismatch("sequence and prediction shapes differ".into())
    );
    let mut value = 0.0;
    let mut floored = 0;
    let mut weight = None;
    for i in 0..xt.len() {
        if !xt.is_masked(i) {
            ensure!(
                xt.tokens()[i] == x0.tokens()[i],
                invalid!("x_t disagrees with x_0 at unmasked position {i}")
            );
            continue;
        }
        let w = match weight {
            Some(w) => w,
            None => {
                let w = discrete_weight(ms, t, mode)?;
                weight = Some(w);
                w
            }
        };
        let p = x0_probs.row(i)[x0.tokens()[i] as usize];
        let p = if p < PROB_FLOOR {
            floored += 1;
            PROB_FLOOR
        } else {
            p
        };
        value += w * p.ln();
    }
    Ok(NelboTerm { value, floored })
}
