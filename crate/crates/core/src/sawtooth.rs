//! Binary sequences whose bit probabilities follow a periodic ramp shifted by
//! a uniform latent.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;

use crate::discrete::TokenSequence;
use crate::error::{ensure, invalid, LddmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SawtoothConfig {
    pub seq_len: usize,
    pub periods: usize,
    pub floor: f64,
}

impl Default for SawtoothConfig {
    fn default() -> Self {
        SawtoothConfig { seq_len: 128, periods: 2, floor: 0.01 }
    }
}

impl SawtoothConfig {
    /// Four positions, small enough for exact enumeration.
    pub fn mini() -> Self {
        SawtoothConfig { seq_len: 4, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.seq_len >= 1, invalid!("sequence length must be positive"));
        ensure!(self.periods >= 1, invalid!("need at least one period"));
        ensure!((0.0..=0.5).contains(&self.floor), invalid!("floor {} outside [0, 0.5]", self.floor));
        Ok(())
    }
}

/// Probability that position `i` (1-based) is a one, given shift `y`.
pub fn sawtooth_prob(i: usize, y: f64, cfg: &SawtoothConfig) -> Result<f64> {
    ensure!(i >= 1 && i <= cfg.seq_len, invalid!("position {i} outside [1, {}]", cfg.seq_len));
    let v = cfg.periods as f64 * ((i - 1) as f64 / cfg.seq_len as f64 + y);
    let frac = v - v.floor();
    Ok(cfg.floor + (1.0 - 2.0 * cfg.floor) * (1.0 - (2.0 * frac - 1.0).abs()))
}

/// `n` sequences with their shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct SawtoothBatch {
    /// `[n * S]` bits, row-major.
    pub tokens: Vec<u32>,
    pub shifts: Vec<f64>,
    pub seq_len: usize,
}

impl SawtoothBatch {
    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// Rows as sequences over `{0, 1, mask}`.
    pub fn sequences(&self) -> Vec<TokenSequence> {
        (0..self.len())
            .map(|r| TokenSequence::new(self.row(r).to_vec(), 3).expect("bits are valid tokens"))
            .collect()
    }
}

/// Fresh draws: `y ~ U[0, 1)`, then independent bits with `P(1) = omega(i, y)`.
pub fn sample_sawtooth_batch<R: Rng + ?Sized>(n: usize, cfg: &SawtoothConfig, rng: &mut R) -> Result<SawtoothBatch> {
    cfg.validate()?;
    ensure!(n >= 1, invalid!("batch size must be positive"));
    let mut tokens = Vec::with_capacity(n * cfg.seq_len);
    let mut shifts = Vec::with_capacity(n);
    for _ in 0..n {
        let y: f64 = rng.random();
        for i in 1..=cfg.seq_len {
            let p = sawtooth_prob(i, y, cfg)?;
            tokens.push(u32::from(rng.random::<f64>() < p));
        }
        shifts.push(y);
    }
    Ok(SawtoothBatch { tokens, shifts, seq_len: cfg.seq_len })
}

/// Token matrix as text: a header line `n S`, then one row per line with
/// space-separated token ids.
pub fn write_token_matrix(path: &Path, tokens: &[u32], seq_len: usize, header: bool) -> Result<()> {
    ensure!(
        seq_len >= 1 && tokens.len().is_multiple_of(seq_len),
        LddmError::ShapeMismatch(format!("{} tokens do not form rows of {seq_len}", tokens.len()))
    );
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if header {
        writeln!(w, "{} {}", tokens.len() / seq_len, seq_len)?;
    }
    for row in tokens.chunks(seq_len) {
        let line: Vec<String> = row.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a token matrix with or without the `n S` header. Returns the flat
/// tokens and the row length.
pub fn read_token_matrix(path: &Path) -> Result<(Vec<u32>, usize)> {
    let file = std::fs::File::open(path)?;
    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|v| v.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| LddmError::Parse(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        rows.push(row);
    }
    ensure!(!rows.is_empty(), LddmError::Parse(format!("{}: no rows", path.display())));
    let has_header = rows[0].len() == 2
        && rows[0][0] as usize == rows.len() - 1
        && rows[1..].iter().all(|r| r.len() == rows[0][1] as usize);
    if has_header {
        rows.remove(0);
    }
    ensure!(!rows.is_empty(), LddmError::Parse(format!("{}: header but no rows", path.display())));
    let s = rows[0].len();
    ensure!(
        rows.iter().all(|r| r.len() == s),
        LddmError::Parse(format!("{}: rows have differing lengths", path.display()))
    );
    Ok((rows.concat(), s))
}
