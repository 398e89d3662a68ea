//! Sliced Wasserstein distance, positional entropy and the NELBO-based
//! perplexity bound.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::backbone::{Graph, ParameterStore};
use crate::error::{ensure, invalid, LddmError, Result};
use crate::lddm::{LddmModel, Schedules, Weighting};
use crate::rng::{fill_normal, StreamKey};
use crate::schedules::WeightMode;

/// Mean over `n_dirs` Gaussian directions of the 1-D Wasserstein-1 distance
/// between the projected samples.
pub fn sliced_wasserstein<R: Rng + ?Sized>(a: &Array2<f64>, b: &Array2<f64>, n_dirs: usize, rng: &mut R) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        invalid!("sample matrices differ in shape: {:?} vs {:?}", a.dim(), b.dim())
    );
    ensure!(a.nrows() >= 1 && n_dirs >= 1, invalid!("need at least one sample and one direction"));
    let d = a.ncols();
    let mut u = vec![0.0; d * n_dirs];
    fill_normal(rng, &mut u);
    let u = Array2::from_shape_vec((d, n_dirs), u).map_err(|e| LddmError::Internal(e.to_string()))?;
    let pa = a.dot(&u);
    let pb = b.dot(&u);
    let n = a.nrows();
    let mut total = 0.0;
    let (mut ca, mut cb) = (vec![0.0; n], vec![0.0; n]);
    for j in 0..n_dirs {
        for i in 0..n {
            ca[i] = pa[[i, j]];
            cb[i] = pb[[i, j]];
        }
        ca.sort_unstable_by(f64::total_cmp);
        cb.sort_unstable_by(f64::total_cmp);
        total += ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    Ok(total / n_dirs as f64)
}

/// Token rows as a real matrix with raw token ids as coordinates.
pub fn tokens_to_matrix(tokens: &[u32], seq_len: usize) -> Result<Array2<f64>> {
    ensure!(
        seq_len >= 1 && tokens.len().is_multiple_of(seq_len),
        LddmError::ShapeMismatch(format!("{} tokens do not form rows of {seq_len}", tokens.len()))
    );
    Array2::from_shape_vec((tokens.len() / seq_len, seq_len), tokens.iter().map(|&t| t as f64).collect())
        .map_err(|e| LddmError::Internal(e.to_string()))
}

/// Mean over positions of the entropy (nats) of the empirical token frequencies.
pub fn positional_entropy(tokens: &[u32], seq_len: usize, vocab: usize) -> Result<f64> {
    ensure!(
        seq_len >= 1 && !tokens.is_empty() && tokens.len().is_multiple_of(seq_len),
        LddmError::ShapeMismatch(format!("{} tokens do not form rows of {seq_len}", tokens.len()))
    );
    let m = tokens.len() / seq_len;
    let mut counts = vec![0usize; seq_len * vocab];
    for row in tokens.chunks(seq_len) {
        for (i, &t) in row.iter().enumerate() {
            ensure!((t as usize) < vocab, invalid!("token {t} outside vocabulary {vocab}"));
            counts[i * vocab + t as usize] += 1;
        }
    }
    let mut total = 0.0;
    for pos in counts.chunks(vocab) {
        for &c in pos {
            if c > 0 {
                let p = c as f64 / m as f64;
                total -= p * p.ln();
            }
        }
    }
    Ok(total / seq_len as f64)
}

/// Monte Carlo per-token data-channel NELBO.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NelboEstimate {
    pub per_token: f64,
    pub std_err: f64,
}

impl NelboEstimate {
    pub fn ppl_bound(&self) -> f64 {
        self.per_token.exp()
    }
}

/// Per-token NELBO of the data channel under ELBO weights: `mc_draws` noise
/// draws (time, masks, encoder and latent noise) per sequence of `x0`.
pub fn validation_nelbo(
    model: &LddmModel,
    store: &ParameterStore,
    sch: &Schedules,
    x0: &[u32],
    mc_draws: usize,
    key: StreamKey,
) -> Result<NelboEstimate> {
    let s = model.seq_len();
    ensure!(mc_draws >= 1, invalid!("need at least one Monte Carlo draw"));
    ensure!(
        !x0.is_empty() && x0.len().is_multiple_of(s),
        LddmError::ShapeMismatch(format!("{} tokens do not form rows of {s}", x0.len()))
    );
    let weighting = Weighting { data: WeightMode::Elbo, latent: WeightMode::Unit };
    let chunk_rows = 256;
    let mut per_draw = Vec::with_capacity(mc_draws);
    let n = x0.len() / s;
    for d in 0..mc_draws {
        let mut total = 0.0;
        for (c, chunk) in x0.chunks(chunk_rows * s).enumerate() {
            let mut g = Graph::<f32>::eval(store);
            let (_, lb) = model.loss(&mut g, chunk, sch, weighting, 0.0, key.fork2(d as u64, c as u64))?;
            total += lb.data_term * (chunk.len() / s) as f64;
        }
        per_draw.push(total / n as f64);
    }
    let mean = per_draw.iter().sum::<f64>() / mc_draws as f64;
    let std_err = if mc_draws > 1 {
        let var = per_draw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (mc_draws - 1) as f64;
        (var / mc_draws as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(NelboEstimate { per_token: mean, std_err })
}

/// `exp` of the per-token data NELBO: an upper bound on perplexity.
pub fn validation_ppl_bound(
    model: &LddmModel,
    store: &ParameterStore,
    sch: &Schedules,
    x0: &[u32],
    mc_draws: usize,
    key: StreamKey,
) -> Result<f64> {
    Ok(validation_nelbo(model, store, sch, x0, mc_draws, key)?.ppl_bound())
}

/// Evaluation of one model at one sampling budget.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub model: String,
    pub budget: usize,
    pub nfe: usize,
    pub swd: f64,
    pub entropy: f64,
    pub nelbo_ppl: f64,
    pub wall_seconds: f64,
}

pub const CSV_HEADER: &str = "run_id,model,budget,nfe,swd,entropy,nelbo_ppl,wall_seconds";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.3}",
            self.run_id, self.model, self.budget, self.nfe, self.swd, self.entropy, self.nelbo_ppl, self.wall_seconds
        )
    }
}

/// Append rows to a metrics CSV, writing the header if the file is new.
pub fn append_csv(path: &Path, rows: &[MetricReport]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}
