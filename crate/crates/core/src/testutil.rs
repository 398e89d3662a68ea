//! Shared helpers for unit tests.

use rand::seq::index::sample;

use crate::backbone::{loss_gradients, Graph, ParameterStore, Var};
use crate::error::Result;
use crate::rng::{normal, StreamKey};

pub fn randomize(store: &mut ParameterStore, std: f64, seed: u64) {
    let mut rng = StreamKey::root(seed).rng();
    for (_, p) in store.iter_mut() {
        p.mapv_inplace(|_| std * normal(&mut rng));
    }
}

/// Compare tape gradients with central differences on `coords` random
/// parameter coordinates.
pub fn check_gradients<L>(store: &ParameterStore, dropout_seed: Option<u64>, coords: usize, loss: L)
where
    L: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let drop = || dropout_seed.map(|s| StreamKey::root(s).rng());
    let (_, grads) = loss_gradients::<f64, _>(store, drop(), &loss).unwrap();
    let eval = |s: &ParameterStore| {
        let mut g = Graph::<f64>::differentiable(s, drop());
        let v = loss(&mut g).unwrap();
        g.tape.scalar(v)
    };
    let flat: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(n, p)| (0..p.len()).map(move |i| (n.clone(), i)))
        .collect();
    let mut rng = StreamKey::root(99).rng();
    let picks = sample(&mut rng, flat.len(), coords.min(flat.len()));
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut informative = 0;
    let n = picks.len();
    for k in picks {
        let (name, i) = &flat[k];
        let mut s = store.clone();
        let cols = s.get(name).unwrap().ncols();
        let (r, c) = (i / cols, i % cols);
        s.get_mut(name).unwrap()[[r, c]] += h;
        let up = eval(&s);
        s.get_mut(name).unwrap()[[r, c]] -= 2.0 * h;
        let down = eval(&s);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(name).unwrap()[[r, c]];
        let scale = analytic.abs().max(numeric.abs());
        let err = (analytic - numeric).abs();
        if scale > 1e-6 {
            worst = worst.max(err / scale);
            informative += 1;
        }
        assert!(
            err <= 1e-4 * scale + 1e-8,
            "{name}[{r},{c}]: analytic {analytic}, numeric {numeric}"
        );
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
    assert!(informative * 2 >= n, "only {informative} of {n} coordinates had a visible gradient");
}
