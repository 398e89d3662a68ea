//! Exact enumeration of masked diffusion on tiny state spaces, and the
//! factorization lower bounds on the NELBO of any factorized reverse model.

use std::fmt::Write as _;

use crate::discrete::{CategoricalField, TokenSequence};
use crate::error::{ensure, invalid, LddmError, Result};
use crate::lddm::DataPredictor;
use crate::sawtooth::{sawtooth_prob, SawtoothConfig};
use crate::schedules::{elbo_weight_discrete, MaskSchedule};

/// Largest `K^S * (T + 1)` the enumeration accepts.
pub const ENUMERATION_BUDGET: usize = 1_000_000;

const NORM_TOL: f64 = 1e-12;

/// A finite latent variable: weights over values and one clean table per value.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub weights: Vec<f64>,
    pub conditionals: Vec<Vec<f64>>,
}

/// Clean distribution over `(K-1)^S` sequences. Index `sum_i x_i (K-1)^(S-1-i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumerableTarget {
    pub name: String,
    seq_len: usize,
    vocab: usize,
    q0: Vec<f64>,
    latent: Option<LatentTable>,
}

fn check_table(p: &[f64], len: usize, what: &str) -> Result<()> {
    ensure!(p.len() == len, LddmError::ShapeMismatch(format!("{what}: {} entries, expected {len}", p.len())));
    ensure!(p.iter().all(|&v| v >= 0.0 && v.is_finite()), invalid!("{what}: negative or non-finite entry"));
    let sum: f64 = p.iter().sum();
    ensure!((sum - 1.0).abs() <= NORM_TOL, invalid!("{what}: sums to {sum}"));
    Ok(())
}

impl EnumerableTarget {
    pub fn new(name: impl Into<String>, seq_len: usize, vocab: usize, q0: Vec<f64>) -> Result<Self> {
        ensure!((1..=4).contains(&seq_len), invalid!("enumerable targets need 1 <= S <= 4, got {seq_len}"));
        ensure!((2..=4).contains(&vocab), invalid!("enumerable targets need 2 <= K <= 4, got {vocab}"));
        check_table(&q0, (vocab - 1).pow(seq_len as u32), "q0")?;
        Ok(EnumerableTarget { name: name.into(), seq_len, vocab, q0, latent: None })
    }

    /// Target defined by a latent mixture; `q0` is the mixture marginal.
    pub fn with_latent(name: impl Into<String>, seq_len: usize, vocab: usize, latent: LatentTable) -> Result<Self> {
        let n = (vocab.max(2) - 1).pow(seq_len as u32);
        check_table(&latent.weights, latent.conditionals.len(), "latent weights")?;
        let mut q0 = vec![0.0; n];
        for (w, c) in latent.weights.iter().zip(&latent.conditionals) {
            check_table(c, n, "conditional table")?;
            for (a, b) in q0.iter_mut().zip(c) {
                *a += w * b;
            }
        }
        let sum: f64 = q0.iter().sum();
        q0.iter_mut().for_each(|v| *v /= sum);
        let mut t = EnumerableTarget::new(name, seq_len, vocab, q0)?;
        t.latent = Some(latent);
        Ok(t)
    }

    /// `q0(00) = q0(11) = 1/2` over binary pairs.
    pub fn correlated_pair() -> Self {
        EnumerableTarget::new("correlated_pair", 2, 3, vec![0.5, 0.0, 0.0, 0.5]).expect("valid table")
    }

    /// Correlated pair with a latent equal to the shared bit.
    pub fn correlated_pair_informative() -> Self {
        let latent = LatentTable {
            weights: vec![0.5, 0.5],
            conditionals: vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]],
        };
        EnumerableTarget::with_latent("correlated_pair_informative", 2, 3, latent).expect("valid table")
    }

    /// Correlated pair with a latent independent of the data.
    pub fn correlated_pair_uninformative() -> Self {
        let q = vec![0.5, 0.0, 0.0, 0.5];
        let latent = LatentTable { weights: vec![0.25, 0.75], conditionals: vec![q.clone(), q] };
        EnumerableTarget::with_latent("correlated_pair_uninformative", 2, 3, latent).expect("valid table")
    }

    /// Independent binary positions with `P(x_i = 1) = p[i]`.
    pub fn independent_binary(p: &[f64]) -> Result<Self> {
        let s = p.len();
        ensure!(p.iter().all(|v| (0.0..=1.0).contains(v)), invalid!("probabilities outside [0, 1]"));
        let q0 = (0..1usize << s)
            .map(|idx| {
                (0..s)
                    .map(|i| if (idx >> (s - 1 - i)) & 1 == 1 { p[i] } else { 1.0 - p[i] })
                    .product()
            })
            .collect();
        EnumerableTarget::new("independent", s, 3, q0)
    }

    /// Sawtooth with the shift discretized into `bins` uniform bins, each
    /// represented by its center; conditionally on the bin the bits factorize.
    pub fn sawtooth_mini(cfg: &SawtoothConfig, bins: usize) -> Result<Self> {
        ensure!(bins >= 1, invalid!("need at least one latent bin"));
        let s = cfg.seq_len;
        let mut conditionals = Vec::with_capacity(bins);
        for b in 0..bins {
            let y = (b as f64 + 0.5) / bins as f64;
            let w: Vec<f64> = (1..=s).map(|i| sawtooth_prob(i, y, cfg)).collect::<Result<_>>()?;
            let table = (0..1usize << s)
                .map(|idx| {
                    (0..s)
                        .map(|i| if (idx >> (s - 1 - i)) & 1 == 1 { w[i] } else { 1.0 - w[i] })
                        .product()
                })
                .collect();
            conditionals.push(table);
        }
        let latent = LatentTable { weights: vec![1.0 / bins as f64; bins], conditionals };
        EnumerableTarget::with_latent("sawtooth_mini", s, 3, latent)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn q0(&self) -> &[f64] {
        &self.q0
    }

    pub fn latent(&self) -> Option<&LatentTable> {
        self.latent.as_ref()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.q0)
    }

    /// Clean sequence with index `idx`.
    pub fn clean_tokens(&self, idx: usize) -> Vec<u32> {
        decode(idx, self.seq_len, self.vocab - 1)
    }

    fn states(&self) -> usize {
        self.vocab.pow(self.seq_len as u32)
    }

    fn conditional(&self, q0: Vec<f64>) -> EnumerableTarget {
        EnumerableTarget { name: self.name.clone(), seq_len: self.seq_len, vocab: self.vocab, q0, latent: None }
    }
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

fn decode(mut idx: usize, len: usize, base: usize) -> Vec<u32> {
    let mut out = vec![0u32; len];
    for i in (0..len).rev() {
        out[i] = (idx % base) as u32;
        idx /= base;
    }
    out
}

fn encode(tokens: &[u32], base: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * base + t as usize)
}

fn check_budget(target: &EnumerableTarget, ms: &MaskSchedule) -> Result<()> {
    let size = target.states().saturating_mul(ms.steps() + 1);
    if size > ENUMERATION_BUDGET {
        return Err(LddmError::Capacity(format!(
            "{size} states exceed the enumeration budget of {ENUMERATION_BUDGET}"
        )));
    }
    Ok(())
}

/// Exact tables at one step `t`, indexed by noisy states in base `K`.
#[derive(Clone, Debug)]
pub struct ReverseTables {
    pub t: usize,
    /// Marginal `q_t(x_t)`.
    pub q_t: Vec<f64>,
    /// `q_{t-1|t}(. | x_t)` for each `x_t` with positive mass (empty otherwise).
    pub joint: Vec<Vec<f64>>,
    /// Per-position `q^i_{t-1|t}(. | x_t)`, `S` rows of `K` entries each.
    pub marginals: Vec<Vec<Vec<f64>>>,
}

impl ReverseTables {
    /// `E_{x_t}[KL(q_{t-1|t} || prod_i q^i_{t-1|t})]`.
    pub fn expected_factorization_kl(&self, seq_len: usize, vocab: usize) -> f64 {
        let mut total = 0.0;
        for (xt, &pt) in self.q_t.iter().enumerate() {
            if pt <= 0.0 {
                continue;
            }
            let mut kl = 0.0;
            for (xs, &p) in self.joint[xt].iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let toks = decode(xs, seq_len, vocab);
                let q: f64 = toks.iter().enumerate().map(|(i, &tok)| self.marginals[xt][i][tok as usize]).product();
                kl += p * (p / q).ln();
            }
            total += pt * kl.max(0.0);
        }
        total
    }
}

/// Exact `q_t`, `q_{t-1|t}` and its per-position marginals by Bayes inversion.
pub fn enumerate_reverse(target: &EnumerableTarget, ms: &MaskSchedule, t: usize) -> Result<ReverseTables> {
    check_budget(target, ms)?;
    ensure!(t >= 1 && t <= ms.steps(), invalid!("step {t} outside [1, {}]", ms.steps()));
    let (s, k) = (target.seq_len, target.vocab);
    let mask = (k - 1) as u32;
    let n = target.states();
    let (g_prev, g_t) = (ms.gamma_bar(t - 1), ms.gamma_bar(t));
    // Per position, given clean token c: (x_{t-1}, x_t) is (c, c) w.p. g_t,
    // (c, m) w.p. g_prev - g_t, (m, m) w.p. 1 - g_prev.
    let cases = [(false, false, g_t), (false, true, g_prev - g_t), (true, true, 1.0 - g_prev)];
    let mut pair = vec![0.0; n * n];
    let mut q_t = vec![0.0; n];
    let mut choice = vec![0usize; s];
    for (c_idx, &p0) in target.q0.iter().enumerate() {
        if p0 <= 0.0 {
            continue;
        }
        let clean = decode(c_idx, s, k - 1);
        let combos = 3usize.pow(s as u32);
        for combo in 0..combos {
            let mut rem = combo;
            for c in choice.iter_mut() {
                *c = rem % 3;
                rem /= 3;
            }
            let mut p = p0;
            let mut prev = vec![0u32; s];
            let mut cur = vec![0u32; s];
            for i in 0..s {
                let (pm, cm, w) = cases[choice[i]];
                p *= w;
                prev[i] = if pm { mask } else { clean[i] };
                cur[i] = if cm { mask } else { clean[i] };
            }
            if p <= 0.0 {
                continue;
            }
            let (a, b) = (encode(&prev, k), encode(&cur, k));
            pair[b * n + a] += p;
            q_t[b] += p;
        }
    }
    let mut joint = vec![Vec::new(); n];
    let mut marginals = vec![Vec::new(); n];
    for b in 0..n {
        if q_t[b] <= 0.0 {
            continue;
        }
        let row: Vec<f64> = pair[b * n..(b + 1) * n].iter().map(|v| v / q_t[b]).collect();
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(LddmError::Internal(format!("reverse table for state {b} sums to {sum}")));
        }
        let mut m = vec![vec![0.0; k]; s];
        for (a, &p) in row.iter().enumerate() {
            if p > 0.0 {
                for (i, tok) in decode(a, s, k).into_iter().enumerate() {
                    m[i][tok as usize] += p;
                }
            }
        }
        joint[b] = row;
        marginals[b] = m;
    }
    Ok(ReverseTables { t, q_t, joint, marginals })
}

/// `sum_t E[KL(q_{t-1|t} || prod_i q^i_{t-1|t})] + H(q0)`, in nats per sequence.
pub fn factorization_bound(target: &EnumerableTarget, ms: &MaskSchedule) -> Result<f64> {
    check_budget(target, ms)?;
    let mut total = target.entropy();
    for t in 1..=ms.steps() {
        total += enumerate_reverse(target, ms, t)?.expected_factorization_kl(target.seq_len, target.vocab);
    }
    Ok(total)
}

/// Latent-conditioned bound: the per-value bound averaged over the latent.
pub fn conditional_factorization_bound(target: &EnumerableTarget, ms: &MaskSchedule) -> Result<f64> {
    let latent = target
        .latent
        .as_ref()
        .ok_or_else(|| invalid!("target `{}` has no latent variable", target.name))?;
    let mut total = 0.0;
    for (w, cond) in latent.weights.iter().zip(&latent.conditionals) {
        if *w > 0.0 {
            total += w * factorization_bound(&target.conditional(cond.clone()), ms)?;
        }
    }
    Ok(total)
}

/// The exact clean-token posterior marginals `q(x0^i | x_t)`: the optimal
/// factorized denoiser. Masking is independent of token values, so the
/// posterior does not depend on `t`.
#[derive(Clone, Debug)]
pub struct TruePosterior {
    seq_len: usize,
    vocab: usize,
    table: Vec<Option<CategoricalField>>,
}

impl TruePosterior {
    pub fn new(target: &EnumerableTarget) -> Self {
        let (s, k) = (target.seq_len, target.vocab);
        let mask = (k - 1) as u32;
        let n = target.states();
        let mut table = Vec::with_capacity(n);
        for state in 0..n {
            let xt = decode(state, s, k);
            let mut m = vec![0.0; s * k];
            let mut tot = 0.0;
            for (c_idx, &p) in target.q0.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let clean = target.clean_tokens(c_idx);
                if xt.iter().zip(&clean).any(|(&a, &b)| a != mask && a != b) {
                    continue;
                }
                tot += p;
                for (i, &c) in clean.iter().enumerate() {
                    m[i * k + c as usize] += p;
                }
            }
            table.push(if tot > 0.0 {
                m.iter_mut().for_each(|v| *v /= tot);
                CategoricalField::new(m, s, k).ok()
            } else {
                None
            });
        }
        TruePosterior { seq_len: s, vocab: k, table }
    }

    pub fn posterior(&self, xt: &TokenSequence) -> Result<&CategoricalField> {
        ensure!(
            xt.len() == self.seq_len && xt.vocab() == self.vocab,
            LddmError::ShapeMismatch("sequence shape does not match the target".into())
        );
        self.table[encode(xt.tokens(), self.vocab)]
            .as_ref()
            .ok_or_else(|| invalid!("state {:?} has zero probability under the target", xt.tokens()))
    }
}

impl DataPredictor for TruePosterior {
    fn predict_tokens(&mut self, xt: &[TokenSequence], _t: usize) -> Result<Vec<CategoricalField>> {
        xt.iter().map(|x| self.posterior(x).cloned()).collect()
    }
}

/// Exact NELBO (nats per sequence) of the factorized reverse model driven by
/// `pred`, enumerating every clean sequence, step and noisy state.
pub fn exact_nelbo<P: DataPredictor>(target: &EnumerableTarget, ms: &MaskSchedule, pred: &mut P) -> Result<f64> {
    check_budget(target, ms)?;
    let (s, k) = (target.seq_len, target.vocab);
    let mask = (k - 1) as u32;
    let n = target.states();
    let all: Vec<TokenSequence> = (0..n)
        .map(|st| TokenSequence::new(decode(st, s, k), k))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for t in 1..=ms.steps() {
        let w = elbo_weight_discrete(ms, t)?;
        let g = ms.gamma_bar(t);
        let preds = pred.predict_tokens(&all, t)?;
        for (c_idx, &p0) in target.q0.iter().enumerate() {
            if p0 <= 0.0 {
                continue;
            }
            let clean = target.clean_tokens(c_idx);
            for subset in 0..1usize << s {
                let mut xt = clean.clone();
                let mut p = p0;
                for (i, x) in xt.iter_mut().enumerate() {
                    if (subset >> i) & 1 == 1 {
                        *x = mask;
                        p *= 1.0 - g;
                    } else {
                        p *= g;
                    }
                }
                if p <= 0.0 {
                    continue;
                }
                let field = &preds[encode(&xt, k)];
                let mut lp = 0.0;
                for (i, &c) in clean.iter().enumerate() {
                    if (subset >> i) & 1 == 1 {
                        lp += field.row(i)[c as usize].max(crate::discrete::PROB_FLOOR).ln();
                    }
                }
                total += p * w * lp;
            }
        }
    }
    Ok(total)
}

/// One row of the oracle report.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub target: String,
    pub steps: usize,
    pub bound_unconditional: f64,
    pub bound_conditional: Option<f64>,
    pub entropy: f64,
}

pub fn oracle_row(target: &EnumerableTarget, ms: &MaskSchedule) -> Result<OracleRow> {
    Ok(OracleRow {
        target: target.name.clone(),
        steps: ms.steps(),
        bound_unconditional: factorization_bound(target, ms)?,
        bound_conditional: match target.latent {
            Some(_) => Some(conditional_factorization_bound(target, ms)?),
            None => None,
        },
        entropy: target.entropy(),
    })
}

/// Whitespace-aligned text table of oracle rows.
pub fn format_report(rows: &[OracleRow]) -> String {
    let mut out = format!(
        "{:<30} {:>6} {:>20} {:>18} {:>10}\n",
        "target", "T", "bound_unconditional", "bound_conditional", "H(q0)"
    );
    for r in rows {
        let cond = r.bound_conditional.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<30} {:>6} {:>20.4} {:>18} {:>10.4}",
            r.target, r.steps, r.bound_unconditional, cond, r.entropy
        );
    }
    out
}

/// Built-in targets reported by the command line tool.
pub fn builtin_targets() -> Result<Vec<EnumerableTarget>> {
    let mut correlated = EnumerableTarget::correlated_pair_informative();
    correlated.name = "correlated_pair".into();
    Ok(vec![
        correlated,
        EnumerableTarget::correlated_pair_uninformative(),
        EnumerableTarget::independent_binary(&[0.2, 0.5, 0.9])?,
        EnumerableTarget::sawtooth_mini(&SawtoothConfig::mini(), 8)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::MaskScheduleKind;
    use std::f64::consts::LN_2;

    fn linear(t: usize) -> MaskSchedule {
        MaskSchedule::new(t, MaskScheduleKind::Linear).unwrap()
    }

    #[test]
    fn correlated_pair_tables() {
        let target = EnumerableTarget::correlated_pair();
        let tables = enumerate_reverse(&target, &linear(1), 1).unwrap();
        let mm = encode(&[2, 2], 3);
        assert!((tables.q_t[mm] - 1.0).abs() < 1e-15);
        let mut expect = vec![0.0; 9];
        expect[encode(&[0, 0], 3)] = 0.5;
        expect[encode(&[1, 1], 3)] = 0.5;
        assert_eq!(tables.joint[mm], expect);
        for m in &tables.marginals[mm] {
            assert_eq!(m, &vec![0.5, 0.5, 0.0]);
        }
    }

    #[test]
    fn first_step_reverse_is_concentrated_on_completions() {
        let target = EnumerableTarget::independent_binary(&[0.3, 0.6]).unwrap();
        let tables = enumerate_reverse(&target, &linear(3), 1).unwrap();
        for (xt, &p) in tables.q_t.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let noisy = decode(xt, 2, 3);
            for (xs, &q) in tables.joint[xt].iter().enumerate() {
                if q > 0.0 {
                    let prev = decode(xs, 2, 3);
                    assert!(prev.iter().all(|&v| v != 2));
                    assert!(noisy.iter().zip(&prev).all(|(&a, &b)| a == 2 || a == b));
                }
            }
        }
        assert!(enumerate_reverse(&target, &linear(3), 0).is_err());
    }

    #[test]
    fn bound_examples() {
        let pair = EnumerableTarget::correlated_pair();
        assert!((factorization_bound(&pair, &linear(1)).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        let info = EnumerableTarget::correlated_pair_informative();
        assert!(conditional_factorization_bound(&info, &linear(1)).unwrap().abs() < 1e-12);
        let ind = EnumerableTarget::independent_binary(&[0.2, 0.7, 0.5]).unwrap();
        let b = factorization_bound(&ind, &linear(6)).unwrap();
        assert!((b - ind.entropy()).abs() < 1e-12);
        let uninf = EnumerableTarget::correlated_pair_uninformative();
        for t in [1, 3, 7] {
            let ms = linear(t);
            let u = factorization_bound(&uninf, &ms).unwrap();
            let c = conditional_factorization_bound(&uninf, &ms).unwrap();
            assert!((u - c).abs() < 1e-12);
        }
        assert!(conditional_factorization_bound(&pair, &linear(1)).is_err());
    }

    #[test]
    fn relabeling_tokens_preserves_bound() {
        let q = vec![0.1, 0.2, 0.3, 0.05, 0.05, 0.1, 0.15, 0.05];
        let a = EnumerableTarget::new("a", 3, 3, q.clone()).unwrap();
        // Swap token ids 0 and 1 at every position.
        let swapped: Vec<f64> = (0..8).map(|i| q[7 - i]).collect();
        let b = EnumerableTarget::new("b", 3, 3, swapped).unwrap();
        let ms = linear(5);
        let (ba, bb) = (factorization_bound(&a, &ms).unwrap(), factorization_bound(&b, &ms).unwrap());
        assert!((ba - bb).abs() < 1e-12);
    }

    #[test]
    fn sawtooth_mini_conditional_bound_is_lower() {
        let target = EnumerableTarget::sawtooth_mini(&SawtoothConfig::mini(), 8).unwrap();
        let ms = linear(8);
        let u = factorization_bound(&target, &ms).unwrap();
        let c = conditional_factorization_bound(&target, &ms).unwrap();
        assert!(c < u, "conditional {c} vs unconditional {u}");
        assert!(u > target.entropy());
    }

    #[test]
    fn capacity_is_enforced() {
        let target = EnumerableTarget::independent_binary(&[0.5; 4]).unwrap();
        assert!(matches!(factorization_bound(&target, &linear(20_000)), Err(LddmError::Capacity(_))));
    }

    #[test]
    fn optimal_factorized_nelbo_respects_bound() {
        let q = vec![0.1, 0.2, 0.3, 0.05, 0.05, 0.1, 0.15, 0.05];
        let target = EnumerableTarget::new("mixed", 3, 3, q).unwrap();
        let ms = linear(4);
        let bound = factorization_bound(&target, &ms).unwrap();
        let nelbo = exact_nelbo(&target, &ms, &mut TruePosterior::new(&target)).unwrap();
        assert!(nelbo >= bound - 1e-12, "nelbo {nelbo} below bound {bound}");
        // On a factorized target the optimal denoiser meets the bound exactly.
        let ind = EnumerableTarget::independent_binary(&[0.2, 0.7]).unwrap();
        let exact = exact_nelbo(&ind, &ms, &mut TruePosterior::new(&ind)).unwrap();
        assert!((exact - ind.entropy()).abs() < 1e-12);
    }

    #[test]
    fn report_lists_targets() {
        let rows: Vec<OracleRow> = builtin_targets()
            .unwrap()
            .iter()
            .map(|t| oracle_row(t, &linear(1)).unwrap())
            .collect();
        let text = format_report(&rows);
        assert!(text.contains("correlated_pair"));
        assert!(text.contains("1.3863"));
        assert!(text.contains("0.0000"));
    }
}
