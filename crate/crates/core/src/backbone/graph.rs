use std::collections::HashMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::params::{GradStore, ParameterStore};
use super::tape::{Real, Tape, Var};
use crate::error::{LddmError, Result};

/// A forward pass under construction: a tape plus lazily bound parameters.
pub struct Graph<'a, F: Real> {
    pub tape: Tape<F>,
    store: &'a ParameterStore,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    train: bool,
    track_grads: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a, F: Real> Graph<'a, F> {
    /// Evaluation graph: no dropout, no gradient bookkeeping.
    pub fn eval(store: &'a ParameterStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            order: Vec::new(),
            train: false,
            track_grads: false,
            dropout_rng: None,
        }
    }

    /// Graph whose parameters are differentiable. Dropout is active when an
    /// RNG is supplied.
    pub fn differentiable(store: &'a ParameterStore, dropout_rng: Option<ChaCha8Rng>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            order: Vec::new(),
            train: dropout_rng.is_some(),
            track_grads: true,
            dropout_rng,
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.require(name)?.mapv(F::of);
        let v = self.tape.leaf(value, self.track_grads);
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.tape.constant(value.mapv(F::of))
    }

    pub fn input_vec(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<Var> {
        let a = Array2::from_shape_vec((rows, cols), data.iter().map(|&v| F::of(v)).collect())
            .map_err(|e| LddmError::ShapeMismatch(e.to_string()))?;
        Ok(self.tape.constant(a))
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        match (&mut self.dropout_rng, self.train) {
            (Some(rng), true) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => x,
        }
    }

    /// Gradients of `loss` for every parameter in the store (zeros for
    /// parameters the loss never touched).
    pub fn gradients(&self, loss: Var) -> Result<GradStore> {
        let grads = self.tape.backward(loss)?;
        let mut out = self.store.zeros_like();
        for name in &self.order {
            let v = self.bound[name];
            if let Some(g) = &grads[v.0] {
                let dst = out.get_mut(name).expect("bound names come from the store");
                for (d, s) in dst.iter_mut().zip(g.iter()) {
                    *d = s.f64();
                }
            }
        }
        Ok(out)
    }
}

/// Evaluate `loss_fn` on a differentiable graph and return the loss value
/// together with exact gradients for every parameter.
pub fn loss_gradients<F, L>(
    store: &ParameterStore,
    dropout_rng: Option<ChaCha8Rng>,
    loss_fn: L,
) -> Result<(f64, GradStore)>
where
    F: Real,
    L: FnOnce(&mut Graph<'_, F>) -> Result<Var>,
{
    let mut g = Graph::<F>::differentiable(store, dropout_rng);
    let loss = loss_fn(&mut g)?;
    let value = g.tape.scalar(loss).f64();
    if !value.is_finite() {
        return Err(LddmError::NumericalOverflow(format!("loss evaluated to {value}")));
    }
    let grads = g.gradients(loss)?;
    if !grads.all_finite() {
        return Err(LddmError::NumericalOverflow("non-finite gradient".into()));
    }
    Ok((value, grads))
}
