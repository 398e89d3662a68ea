//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is a 2-D array. Batched token streams are stored as
//! `groups * rows_per_group` rows, one group per sequence, and the group-aware
//! ops (modulation, gating, joint attention) broadcast per-sequence vectors
//! over the rows of their group.

use std::fmt::Debug;

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;

use crate::error::{LddmError, Result};

/// Floating-point element type of a tape.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Log-probabilities are floored at `ln(1e-12)`.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu { a: Var, th: Array2<F> },
    Silu(Var),
    LayerNorm { a: Var, inv_std: Vec<F> },
    Modulate { x: Var, shift: Var, scale: Var },
    Gate { x: Var, gate: Var },
    AddGroups { x: Var, v: Var },
    ScaleGroups { x: Var, coef: Vec<F> },
    ConcatGroups { a: Var, b: Var, groups: usize },
    SliceGroups { a: Var, start: usize, len: usize },
    SliceCols { a: Var, start: usize },
    Attention { qkv: Var, heads: usize, seq: usize, probs: Vec<Array2<F>> },
    Embed { table: Var, ids: Vec<u32> },
    AddTiled { x: Var, pos: Var },
    RowNormalize { a: Var, norms: Vec<F> },
    Dropout { a: Var, mask: Array2<F> },
    Reshape(Var),
    SumAll(Var),
    WeightedLogProb { logits: Var, targets: Vec<u32>, weights: Vec<F>, probs: Array2<F>, floored: Vec<bool> },
    WeightedSqErr { pred: Var, target: Var, weights: Vec<F> },
}

pub struct Tape<F: Real> {
    values: Vec<Array2<F>>,
    ops: Vec<Op<F>>,
    needs_grad: Vec<bool>,
    floored: usize,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn data<F>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("tape values are standard layout")
}

#[inline]
fn data_mut<F>(a: &mut Array2<F>) -> &mut [F] {
    a.as_slice_mut().expect("tape values are standard layout")
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// `tanh` through a single `exp`, cheaper than the libm routine.
#[inline]
fn fast_tanh<F: Real>(z: F) -> F {
    let lim = F::of(15.0);
    if z > lim {
        F::one()
    } else if z < -lim {
        -F::one()
    } else {
        let e = (z + z).exp();
        (e - F::one()) / (e + F::one())
    }
}

// tanh approximation of GELU: the tanh term, kept for the backward pass
#[inline]
fn gelu_tanh<F: Real>(x: F) -> F {
    fast_tanh(F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x))
}

#[inline]
fn gelu_grad<F: Real>(x: F, th: F) -> F {
    let half = F::of(0.5);
    let one = F::one();
    let dinner = F::of(GELU_C) * (one + F::of(3.0 * GELU_K) * x * x);
    half * (one + th) + half * x * (one - th * th) * dinner
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new(), floored: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].dim()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.values[v.0][[0, 0]]
    }

    /// Number of log-probability evaluations clamped at the floor so far.
    pub fn floored_count(&self) -> usize {
        self.floored
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn leaf(&mut self, value: Array2<F>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.leaf(value, false)
    }

    fn groups_of(&self, x: Var, per_group: Var) -> Result<usize> {
        let (rows, cols) = self.shape(x);
        let (g, c) = self.shape(per_group);
        if c != cols || g == 0 || rows % g != 0 {
            return Err(LddmError::ShapeMismatch(format!(
                "group op: x {rows}x{cols} vs per-group {g}x{c}"
            )));
        }
        Ok(rows / g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(LddmError::ShapeMismatch(format!("matmul {m}x{k} * {k2}x{n}")));
        }
        let out = self.values[a.0].dot(&self.values[b.0]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.shape(a);
        if self.shape(bias) != (1, n) {
            return Err(LddmError::ShapeMismatch(format!("bias {:?} for width {n}", self.shape(bias))));
        }
        let out = &self.values[a.0] + &self.values[bias.0];
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    /// `a @ w + b`.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(a, w)?;
        self.add_row(h, b)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LddmError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = &self.values[a.0] + &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = &self.values[a.0] - &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = &self.values[a.0] * &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let out = &self.values[a.0] * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let th = x.mapv(gelu_tanh);
        let mut out = x.clone();
        ndarray::Zip::from(&mut out).and(&th).for_each(|o, &t| *o = F::of(0.5) * *o * (F::one() + t));
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a, th }, ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Row-wise layer norm without affine parameters (eps 1e-6).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let (rows, cols) = x.dim();
        let mut out = Array2::<F>::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        let n = F::of(cols as f64);
        let eps = F::of(1e-6);
        {
            let xs = data(x);
            let os = data_mut(&mut out);
            for r in 0..rows {
                let row = &xs[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                let is = F::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (o, &v) in os[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = (v - mean) * is;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { a, inv_std }, ng)
    }

    /// `x * (1 + scale[g]) + shift[g]` with per-group rows of `shift`/`scale`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let per = self.groups_of(x, shift)?;
        self.same_shape(shift, scale, "modulate")?;
        let (rows, cols) = self.shape(x);
        let mut out = Array2::<F>::zeros((rows, cols));
        {
            let xs = data(&self.values[x.0]);
            let sh = data(&self.values[shift.0]);
            let sc = data(&self.values[scale.0]);
            let os = data_mut(&mut out);
            for r in 0..rows {
                let g = r / per;
                for c in 0..cols {
                    let i = r * cols + c;
                    os[i] = xs[i] * (F::one() + sc[g * cols + c]) + sh[g * cols + c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(shift) || self.ng(scale);
        Ok(self.push(out, Op::Modulate { x, shift, scale }, ng))
    }

    /// `x * gate[g]`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let per = self.groups_of(x, gate)?;
        let (rows, cols) = self.shape(x);
        let mut out = Array2::<F>::zeros((rows, cols));
        {
            let xs = data(&self.values[x.0]);
            let gs = data(&self.values[gate.0]);
            let os = data_mut(&mut out);
            for r in 0..rows {
                let g = r / per;
                for c in 0..cols {
                    os[r * cols + c] = xs[r * cols + c] * gs[g * cols + c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gate);
        Ok(self.push(out, Op::Gate { x, gate }, ng))
    }

    /// `x + v[g]`.
    pub fn add_groups(&mut self, x: Var, v: Var) -> Result<Var> {
        let per = self.groups_of(x, v)?;
        let (rows, cols) = self.shape(x);
        let mut out = self.values[x.0].clone();
        {
            let vs = data(&self.values[v.0]);
            let os = data_mut(&mut out);
            for r in 0..rows {
                let g = r / per;
                for c in 0..cols {
                    os[r * cols + c] += vs[g * cols + c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(out, Op::AddGroups { x, v }, ng))
    }

    /// Multiply every row of group `g` by the constant `coef[g]`.
    pub fn scale_groups(&mut self, x: Var, coef: &[f64]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if coef.is_empty() || rows % coef.len() != 0 {
            return Err(LddmError::ShapeMismatch(format!("scale_groups: {rows} rows, {} groups", coef.len())));
        }
        let per = rows / coef.len();
        let coef: Vec<F> = coef.iter().map(|&c| F::of(c)).collect();
        let mut out = self.values[x.0].clone();
        {
            let os = data_mut(&mut out);
            for r in 0..rows {
                let c = coef[r / per];
                for v in &mut os[r * cols..(r + 1) * cols] {
                    *v *= c;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ScaleGroups { x, coef }, ng))
    }

    /// Interleave two grouped streams: for each group, rows of `a` then rows of `b`.
    pub fn concat_groups(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb || ra % groups != 0 || rb % groups != 0 {
            return Err(LddmError::ShapeMismatch(format!("concat_groups {ra}x{ca} / {rb}x{cb}")));
        }
        let (na, nb) = (ra / groups, rb / groups);
        let mut out = Array2::<F>::zeros((ra + rb, ca));
        for g in 0..groups {
            let base = g * (na + nb);
            out.slice_mut(s![base..base + na, ..])
                .assign(&self.values[a.0].slice(s![g * na..(g + 1) * na, ..]));
            out.slice_mut(s![base + na..base + na + nb, ..])
                .assign(&self.values[b.0].slice(s![g * nb..(g + 1) * nb, ..]));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatGroups { a, b, groups }, ng))
    }

    /// Rows `start..start + len` of every group.
    pub fn slice_groups(&mut self, a: Var, groups: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if rows % groups != 0 || start + len > rows / groups {
            return Err(LddmError::ShapeMismatch(format!("slice_groups {rows} rows / {groups}")));
        }
        let per = rows / groups;
        let mut out = Array2::<F>::zeros((groups * len, cols));
        for g in 0..groups {
            out.slice_mut(s![g * len..(g + 1) * len, ..])
                .assign(&self.values[a.0].slice(s![g * per + start..g * per + start + len, ..]));
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceGroups { a, start, len }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cols) = self.shape(a);
        if start + len > cols {
            return Err(LddmError::ShapeMismatch(format!("slice_cols {start}+{len} > {cols}")));
        }
        let out = self.values[a.0].slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    /// Bidirectional multi-head self-attention within each group of `seq` rows.
    /// `qkv` holds `[q | k | v]` along columns.
    pub fn attention(&mut self, qkv: Var, heads: usize, seq: usize) -> Result<Var> {
        let (rows, cols3) = self.shape(qkv);
        if cols3 % 3 != 0 || (cols3 / 3) % heads != 0 || seq == 0 || rows % seq != 0 {
            return Err(LddmError::ShapeMismatch(format!("attention qkv {rows}x{cols3}, heads {heads}, seq {seq}")));
        }
        let width = cols3 / 3;
        let dh = width / heads;
        let groups = rows / seq;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<F>::zeros((rows, width));
        let mut probs = Vec::with_capacity(groups * heads);
        let x = &self.values[qkv.0];
        for g in 0..groups {
            let r0 = g * seq;
            for h in 0..heads {
                let q = x.slice(s![r0..r0 + seq, h * dh..(h + 1) * dh]);
                let k = x.slice(s![r0..r0 + seq, width + h * dh..width + (h + 1) * dh]);
                let v = x.slice(s![r0..r0 + seq, 2 * width + h * dh..2 * width + (h + 1) * dh]);
                let mut sc = q.dot(&k.t());
                for mut row in sc.rows_mut() {
                    let mx = row.iter().fold(F::neg_infinity(), |m, &z| m.max(z * scale));
                    let mut tot = F::zero();
                    for z in row.iter_mut() {
                        *z = (*z * scale - mx).exp();
                        tot += *z;
                    }
                    for z in row.iter_mut() {
                        *z = *z / tot;
                    }
                }
                let o = sc.dot(&v);
                out.slice_mut(s![r0..r0 + seq, h * dh..(h + 1) * dh]).assign(&o);
                probs.push(sc);
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(out, Op::Attention { qkv, heads, seq, probs }, ng))
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, width) = self.shape(table);
        let mut out = Array2::<F>::zeros((ids.len(), width));
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(LddmError::InvalidArgument(format!("token id {id} outside vocabulary {vocab}")));
            }
            out.row_mut(r).assign(&self.values[table.0].row(id as usize));
        }
        let ng = self.ng(table);
        Ok(self.push(out, Op::Embed { table, ids: ids.to_vec() }, ng))
    }

    /// Add the `[per_group, width]` matrix `pos` to every group of `x`.
    pub fn add_tiled(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let (per, c2) = self.shape(pos);
        if cols != c2 || per == 0 || rows % per != 0 {
            return Err(LddmError::ShapeMismatch(format!("add_tiled {rows}x{cols} + {per}x{c2}")));
        }
        let mut out = self.values[x.0].clone();
        {
            let ps = data(&self.values[pos.0]);
            let os = data_mut(&mut out);
            for r in 0..rows {
                let p = r % per;
                for c in 0..cols {
                    os[r * cols + c] += ps[p * cols + c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(pos);
        Ok(self.push(out, Op::AddTiled { x, pos }, ng))
    }

    /// Scale each row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let x = &self.values[a.0];
        let (rows, cols) = x.dim();
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(rows);
        {
            let os = data_mut(&mut out);
            for r in 0..rows {
                let row = &mut os[r * cols..(r + 1) * cols];
                let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                if !(n > F::zero()) {
                    return Err(LddmError::DegenerateInput(format!("row {r} has zero norm")));
                }
                for v in row.iter_mut() {
                    *v = *v / n;
                }
                norms.push(n);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::RowNormalize { a, norms }, ng))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask = self.values[a.0].mapv(|_| if rng.random::<f64>() < p { F::zero() } else { keep });
        let out = &self.values[a.0] * &mask;
        let ng = self.ng(a);
        self.push(out, Op::Dropout { a, mask }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(LddmError::ShapeMismatch(format!("reshape {r}x{c} -> {rows}x{cols}")));
        }
        let out = Array2::from_shape_vec((rows, cols), data(&self.values[a.0]).to_vec())
            .map_err(|e| LddmError::Internal(e.to_string()))?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v: F = data(&self.values[a.0]).iter().copied().sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), v), Op::SumAll(a), ng)
    }

    /// `sum_r weights[r] * max(log_softmax(logits[r])[targets[r]], ln 1e-12)`.
    /// Rows with zero weight are skipped.
    pub fn weighted_log_prob(&mut self, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows || weights.len() != rows {
            return Err(LddmError::ShapeMismatch(format!(
                "weighted_log_prob: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let probs = softmax_rows(&self.values[logits.0]);
        let floor = F::of(LOG_PROB_FLOOR);
        let mut total = F::zero();
        let mut floored = vec![false; rows];
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let tgt = targets[r] as usize;
            if tgt >= cols {
                return Err(LddmError::InvalidArgument(format!("target {tgt} outside {cols} classes")));
            }
            let lp = log_softmax_at(&data(&self.values[logits.0])[r * cols..(r + 1) * cols], tgt);
            let lp = if lp < floor || !lp.is_finite() {
                floored[r] = true;
                self.floored += 1;
                floor
            } else {
                lp
            };
            total += F::of(weights[r]) * lp;
        }
        let weights: Vec<F> = weights.iter().map(|&w| F::of(w)).collect();
        let ng = self.ng(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedLogProb { logits, targets: targets.to_vec(), weights, probs, floored },
            ng,
        ))
    }

    /// `sum_r weights[r] * ||pred[r] - target[r]||^2`.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
        self.same_shape(pred, target, "weighted_sq_err")?;
        let (rows, cols) = self.shape(pred);
        if weights.len() != rows {
            return Err(LddmError::ShapeMismatch(format!("{} weights for {rows} rows", weights.len())));
        }
        let ps = data(&self.values[pred.0]);
        let ts = data(&self.values[target.0]);
        let mut total = F::zero();
        for r in 0..rows {
            let mut acc = F::zero();
            for c in 0..cols {
                let d = ps[r * cols + c] - ts[r * cols + c];
                acc += d * d;
            }
            total += F::of(weights[r]) * acc;
        }
        let weights: Vec<F> = weights.iter().map(|&w| F::of(w)).collect();
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Array2::from_elem((1, 1), total), Op::WeightedSqErr { pred, target, weights }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    /// Entries are `None` for nodes that do not influence `loss` or need no gradient.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Array2<F>>>> {
        if self.shape(loss) != (1, 1) {
            return Err(LddmError::ShapeMismatch("backward needs a scalar loss".into()));
        }
        if !self.scalar(loss).is_finite() {
            return Err(LddmError::NumericalOverflow(format!("loss is {:?}", self.scalar(loss))));
        }
        let mut grads: Vec<Option<Array2<F>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let vals = &self.values;
        let mut acc = |v: Var, d: Array2<F>| {
            if !self.needs_grad[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&vals[b.0].t()));
                }
                if self.ng(*b) {
                    acc(*b, vals[a.0].t().dot(g));
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*a, g.clone());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    acc(*b, g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * &vals[b.0]);
                }
                if self.ng(*b) {
                    acc(*b, g * &vals[a.0]);
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Gelu { a, th } => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(&vals[a.0])
                    .and(th)
                    .for_each(|d, &x, &t| *d *= gelu_grad(x, t));
                acc(*a, d);
            }
            Op::Silu(a) => {
                let mut d = vals[a.0].mapv(|x| {
                    let sg = sigmoid(x);
                    sg * (F::one() + x * (F::one() - sg))
                });
                d *= g;
                acc(*a, d);
            }
            Op::LayerNorm { a, inv_std } => {
                let y = &vals[i];
                let (rows, cols) = y.dim();
                let n = F::of(cols as f64);
                let mut d = Array2::<F>::zeros((rows, cols));
                let (ys, gs) = (data(y), data(g));
                let ds = data_mut(&mut d);
                for r in 0..rows {
                    let yr = &ys[r * cols..(r + 1) * cols];
                    let gr = &gs[r * cols..(r + 1) * cols];
                    let mg = gr.iter().copied().sum::<F>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / n;
                    for c in 0..cols {
                        ds[r * cols + c] = inv_std[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                acc(*a, d);
            }
            Op::Modulate { x, shift, scale } => {
                let (rows, cols) = vals[x.0].dim();
                let groups = vals[shift.0].nrows();
                let per = rows / groups;
                let xs = data(&vals[x.0]);
                let sc = data(&vals[scale.0]);
                let gs = data(g);
                if self.ng(*x) {
                    let mut dx = Array2::<F>::zeros((rows, cols));
                    let d = data_mut(&mut dx);
                    for r in 0..rows {
                        let gg = r / per;
                        for c in 0..cols {
                            d[r * cols + c] = gs[r * cols + c] * (F::one() + sc[gg * cols + c]);
                        }
                    }
                    acc(*x, dx);
                }
                let mut dsh = Array2::<F>::zeros((groups, cols));
                let mut dsc = Array2::<F>::zeros((groups, cols));
                {
                    let a = data_mut(&mut dsh);
                    let b = data_mut(&mut dsc);
                    for r in 0..rows {
                        let gg = r / per;
                        for c in 0..cols {
                            let gv = gs[r * cols + c];
                            a[gg * cols + c] += gv;
                            b[gg * cols + c] += gv * xs[r * cols + c];
                        }
                    }
                }
                acc(*shift, dsh);
                acc(*scale, dsc);
            }
            Op::Gate { x, gate } => {
                let (rows, cols) = vals[x.0].dim();
                let groups = vals[gate.0].nrows();
                let per = rows / groups;
                let xs = data(&vals[x.0]);
                let gt = data(&vals[gate.0]);
                let gs = data(g);
                if self.ng(*x) {
                    let mut dx = Array2::<F>::zeros((rows, cols));
                    let d = data_mut(&mut dx);
                    for r in 0..rows {
                        let gg = r / per;
                        for c in 0..cols {
                            d[r * cols + c] = gs[r * cols + c] * gt[gg * cols + c];
                        }
                    }
                    acc(*x, dx);
                }
                if self.ng(*gate) {
                    let mut dg = Array2::<F>::zeros((groups, cols));
                    let d = data_mut(&mut dg);
                    for r in 0..rows {
                        let gg = r / per;
                        for c in 0..cols {
                            d[gg * cols + c] += gs[r * cols + c] * xs[r * cols + c];
                        }
                    }
                    acc(*gate, dg);
                }
            }
            Op::AddGroups { x, v } => {
                let (rows, cols) = vals[x.0].dim();
                let groups = vals[v.0].nrows();
                let per = rows / groups;
                if self.ng(*v) {
                    let mut dv = Array2::<F>::zeros((groups, cols));
                    let gs = data(g);
                    let d = data_mut(&mut dv);
                    for r in 0..rows {
                        let gg = r / per;
                        for c in 0..cols {
                            d[gg * cols + c] += gs[r * cols + c];
                        }
                    }
                    acc(*v, dv);
                }
                acc(*x, g.clone());
            }
            Op::ScaleGroups { x, coef } => {
                let (rows, cols) = g.dim();
                let per = rows / coef.len();
                let mut d = g.clone();
                let ds = data_mut(&mut d);
                for r in 0..rows {
                    let c = coef[r / per];
                    for v in &mut ds[r * cols..(r + 1) * cols] {
                        *v *= c;
                    }
                }
                acc(*x, d);
            }
            Op::ConcatGroups { a, b, groups } => {
                let groups = *groups;
                let (ra, cols) = vals[a.0].dim();
                let rb = vals[b.0].nrows();
                let (na, nb) = (ra / groups, rb / groups);
                let mut da = Array2::<F>::zeros((ra, cols));
                let mut db = Array2::<F>::zeros((rb, cols));
                for gg in 0..groups {
                    let base = gg * (na + nb);
                    da.slice_mut(s![gg * na..(gg + 1) * na, ..]).assign(&g.slice(s![base..base + na, ..]));
                    db.slice_mut(s![gg * nb..(gg + 1) * nb, ..])
                        .assign(&g.slice(s![base + na..base + na + nb, ..]));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SliceGroups { a, start, len } => {
                let (rows, cols) = vals[a.0].dim();
                let groups = g.nrows() / len;
                let per = rows / groups;
                let mut d = Array2::<F>::zeros((rows, cols));
                for gg in 0..groups {
                    d.slice_mut(s![gg * per + start..gg * per + start + len, ..])
                        .assign(&g.slice(s![gg * len..(gg + 1) * len, ..]));
                }
                acc(*a, d);
            }
            Op::SliceCols { a, start } => {
                let mut d = Array2::<F>::zeros(vals[a.0].dim());
                let len = g.ncols();
                d.slice_mut(s![.., *start..*start + len]).assign(g);
                acc(*a, d);
            }
            Op::Attention { qkv, heads, seq, probs } => {
                let x = &vals[qkv.0];
                let (rows, cols3) = x.dim();
                let width = cols3 / 3;
                let dh = width / heads;
                let groups = rows / seq;
                let scale = F::of(1.0 / (dh as f64).sqrt());
                let mut d = Array2::<F>::zeros((rows, cols3));
                for gg in 0..groups {
                    let r0 = gg * seq;
                    for h in 0..*heads {
                        let p = &probs[gg * heads + h];
                        let q = x.slice(s![r0..r0 + seq, h * dh..(h + 1) * dh]);
                        let k = x.slice(s![r0..r0 + seq, width + h * dh..width + (h + 1) * dh]);
                        let v = x.slice(s![r0..r0 + seq, 2 * width + h * dh..2 * width + (h + 1) * dh]);
                        let go = g.slice(s![r0..r0 + seq, h * dh..(h + 1) * dh]);
                        let dv = p.t().dot(&go);
                        let mut dp = go.dot(&v.t());
                        for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                            let dot: F = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                            for (z, &pp) in drow.iter_mut().zip(prow.iter()) {
                                *z = pp * (*z - dot) * scale;
                            }
                        }
                        let dq = dp.dot(&k);
                        let dk = dp.t().dot(&q);
                        d.slice_mut(s![r0..r0 + seq, h * dh..(h + 1) * dh]).assign(&dq);
                        d.slice_mut(s![r0..r0 + seq, width + h * dh..width + (h + 1) * dh]).assign(&dk);
                        d.slice_mut(s![r0..r0 + seq, 2 * width + h * dh..2 * width + (h + 1) * dh])
                            .assign(&dv);
                    }
                }
                acc(*qkv, d);
            }
            Op::Embed { table, ids } => {
                let mut d = Array2::<F>::zeros(vals[table.0].dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id as usize);
                    row += &g.row(r);
                }
                acc(*table, d);
            }
            Op::AddTiled { x, pos } => {
                if self.ng(*pos) {
                    let (per, cols) = vals[pos.0].dim();
                    let mut dp = Array2::<F>::zeros((per, cols));
                    let gs = data(g);
                    let d = data_mut(&mut dp);
                    for r in 0..g.nrows() {
                        let p = r % per;
                        for c in 0..cols {
                            d[p * cols + c] += gs[r * cols + c];
                        }
                    }
                    acc(*pos, dp);
                }
                acc(*x, g.clone());
            }
            Op::RowNormalize { a, norms } => {
                let y = &vals[i];
                let (rows, cols) = y.dim();
                let mut d = Array2::<F>::zeros((rows, cols));
                let (ys, gs) = (data(y), data(g));
                let ds = data_mut(&mut d);
                for r in 0..rows {
                    let yr = &ys[r * cols..(r + 1) * cols];
                    let gr = &gs[r * cols..(r + 1) * cols];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        ds[r * cols + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                acc(*a, d);
            }
            Op::Dropout { a, mask } => acc(*a, g * mask),
            Op::Reshape(a) => {
                let (r, c) = vals[a.0].dim();
                let d = Array2::from_shape_vec((r, c), data(g).to_vec()).expect("reshape grad");
                acc(*a, d);
            }
            Op::SumAll(a) => acc(*a, Array2::from_elem(vals[a.0].dim(), g[[0, 0]])),
            Op::WeightedLogProb { logits, targets, weights, probs, floored } => {
                let (rows, cols) = probs.dim();
                let up = g[[0, 0]];
                let mut d = Array2::<F>::zeros((rows, cols));
                let ps = data(probs);
                let ds = data_mut(&mut d);
                for r in 0..rows {
                    if weights[r] == F::zero() || floored[r] {
                        continue;
                    }
                    let w = weights[r] * up;
                    let tgt = targets[r] as usize;
                    for c in 0..cols {
                        let ind = if c == tgt { F::one() } else { F::zero() };
                        ds[r * cols + c] = w * (ind - ps[r * cols + c]);
                    }
                }
                acc(*logits, d);
            }
            Op::WeightedSqErr { pred, target, weights } => {
                let (rows, cols) = vals[pred.0].dim();
                let up = g[[0, 0]];
                let mut d = Array2::<F>::zeros((rows, cols));
                {
                    let ps = data(&vals[pred.0]);
                    let ts = data(&vals[target.0]);
                    let ds = data_mut(&mut d);
                    for r in 0..rows {
                        let w = F::of(2.0) * weights[r] * up;
                        for c in 0..cols {
                            ds[r * cols + c] = w * (ps[r * cols + c] - ts[r * cols + c]);
                        }
                    }
                }
                if self.ng(*target) {
                    acc(*target, d.mapv(|v| -v));
                }
                acc(*pred, d);
            }
        }
    }
}

fn log_softmax_at<F: Real>(row: &[F], idx: usize) -> F {
    let mx = row.iter().fold(F::neg_infinity(), |m, &z| m.max(z));
    let lse = row.iter().map(|&z| (z - mx).exp()).sum::<F>().ln() + mx;
    row[idx] - lse
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mx = row.iter().fold(F::neg_infinity(), |m, &z| m.max(z));
        let mut tot = F::zero();
        for z in row.iter_mut() {
            *z = (*z - mx).exp();
            tot += *z;
        }
        for z in row.iter_mut() {
            *z = *z / tot;
        }
    }
    out
}

pub fn to_f64<F: Real>(x: ArrayView2<'_, F>) -> Array2<f64> {
    x.mapv(|v| v.f64())
}
