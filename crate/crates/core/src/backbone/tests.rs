use ndarray::Array2;
use rand::Rng;

use super::*;
use crate::rng::{normal, StreamKey};
use crate::testutil::{check_gradients, randomize};

fn small_cfg(time_conditioned: bool, dropout: f64) -> BackboneConfig {
    BackboneConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        dropout,
        vocab: 3,
        seq_len: 5,
        latent_blocks: 2,
        latent_dim: 4,
        time_conditioned,
    }
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = StreamKey::root(seed).rng();
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = StreamKey::root(seed).rng();
    Array2::from_shape_fn((rows, cols), |_| normal(&mut rng))
}

#[test]
fn dit_gradients_match_finite_differences() {
    let cfg = small_cfg(true, 0.2);
    let net = Dit::new(cfg.clone(), "").unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 2);
    let batch = 2;
    let tokens = random_tokens(batch * cfg.seq_len, cfg.vocab, 3);
    let targets = random_tokens(batch * cfg.seq_len, cfg.vocab - 1, 4);
    let weights: Vec<f64> = (0..batch * cfg.seq_len).map(|i| (i % 3) as f64 * 0.5).collect();
    let t_norm = [0.3, 0.8];
    check_gradients(&store, Some(5), 60, |g| {
        let logits = net.forward(g, &tokens, &t_norm)?;
        g.tape.weighted_log_prob(logits, &targets, &weights)
    });
}

#[test]
fn mmdit_gradients_match_finite_differences() {
    let cfg = small_cfg(true, 0.2);
    let net = MmDit::new(cfg.clone(), "den.", LatentInput::Projected, MmDitHeads::BOTH).unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 6);
    let batch = 2;
    let tokens = random_tokens(batch * cfg.seq_len, cfg.vocab, 7);
    let targets = random_tokens(batch * cfg.seq_len, cfg.vocab - 1, 8);
    let weights = vec![0.7; batch * cfg.seq_len];
    let lat_in = random_matrix(batch * cfg.latent_blocks, cfg.latent_dim, 9);
    let lat_tgt = random_matrix(batch * cfg.latent_blocks, cfg.latent_dim, 10);
    let lw = vec![0.4; batch * cfg.latent_blocks];
    let t_norm = [0.1, 0.6];
    check_gradients(&store, Some(11), 80, |g| {
        let y = g.input(lat_in.clone());
        let out = net.forward(g, &tokens, Some(y), &t_norm)?;
        let a = g.tape.weighted_log_prob(out.logits.unwrap(), &targets, &weights)?;
        let tgt = g.input(lat_tgt.clone());
        let b = g.tape.weighted_sq_err(out.latents.unwrap(), tgt, &lw)?;
        g.tape.sub(b, a)
    });
}

#[test]
fn encoder_style_mmdit_gradients_through_normalization() {
    let cfg = small_cfg(false, 0.0);
    let net = MmDit::new(cfg.clone(), "enc.", LatentInput::LearnedSlots, MmDitHeads::LATENTS).unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 12);
    let batch = 3;
    let tokens = random_tokens(batch * cfg.seq_len, cfg.vocab - 1, 13);
    let target = random_matrix(batch * cfg.latent_blocks, cfg.latent_dim, 14);
    let lw = vec![1.0; batch * cfg.latent_blocks];
    check_gradients(&store, None, 60, |g| {
        let out = net.forward(g, &tokens, None, &[0.0; 3])?;
        let y = g.tape.row_normalize(out.latents.unwrap())?;
        let tgt = g.input(target.clone());
        g.tape.weighted_sq_err(y, tgt, &lw)
    });
}

#[test]
fn latent_mlp_gradients_match_finite_differences() {
    let cfg = small_cfg(true, 0.1);
    let net = LatentMlp::new(cfg.clone(), "lat.").unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 15);
    let batch = 3;
    let x = random_matrix(batch * cfg.latent_blocks, cfg.latent_dim, 16);
    let target = random_matrix(batch * cfg.latent_blocks, cfg.latent_dim, 17);
    let lw = vec![0.5, 1.0, 1.5, 2.0, 0.0, 1.0];
    check_gradients(&store, Some(18), 60, |g| {
        let xv = g.input(x.clone());
        let out = net.forward(g, xv, &[0.2, 0.5, 0.9])?;
        let tgt = g.input(target.clone());
        g.tape.weighted_sq_err(out, tgt, &lw)
    });
}

#[test]
fn zero_init_heads_give_uniform_logits_and_zero_latents() {
    let cfg = small_cfg(true, 0.0);
    let net = MmDit::new(cfg.clone(), "", LatentInput::Projected, MmDitHeads::BOTH).unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(4).rng()).unwrap();
    let mut g = Graph::<f64>::eval(&store);
    let y = g.input(random_matrix(cfg.latent_blocks, cfg.latent_dim, 1));
    let out = net.forward(&mut g, &[0, 1, 2, 0, 1], Some(y), &[0.5]).unwrap();
    assert!(g.tape.value(out.logits.unwrap()).iter().all(|&v| v == 0.0));
    assert!(g.tape.value(out.latents.unwrap()).iter().all(|&v| v == 0.0));
}

#[test]
fn f32_and_f64_forward_agree() {
    let cfg = small_cfg(true, 0.0);
    let net = Dit::new(cfg.clone(), "").unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.2, 3);
    let tokens = random_tokens(cfg.seq_len, cfg.vocab, 5);
    let mut g64 = Graph::<f64>::eval(&store);
    let a = net.forward(&mut g64, &tokens, &[0.4]).unwrap();
    let mut g32 = Graph::<f32>::eval(&store);
    let b = net.forward(&mut g32, &tokens, &[0.4]).unwrap();
    for (x, y) in g64.tape.value(a).iter().zip(g32.tape.value(b).iter()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}

#[test]
fn attention_is_per_sequence() {
    // Changing tokens in one sequence must not affect another.
    let cfg = small_cfg(true, 0.0);
    let net = Dit::new(cfg.clone(), "").unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 7);
    let mut tokens = random_tokens(2 * cfg.seq_len, cfg.vocab, 8);
    let run = |tokens: &[u32]| {
        let mut g = Graph::<f64>::eval(&store);
        let v = net.forward(&mut g, tokens, &[0.3, 0.7]).unwrap();
        g.tape.value(v).clone()
    };
    let before = run(&tokens);
    tokens[cfg.seq_len + 1] = (tokens[cfg.seq_len + 1] + 1) % cfg.vocab as u32;
    let after = run(&tokens);
    let rows = cfg.seq_len;
    assert_eq!(before.slice(ndarray::s![..rows, ..]), after.slice(ndarray::s![..rows, ..]));
    assert_ne!(before.slice(ndarray::s![rows.., ..]), after.slice(ndarray::s![rows.., ..]));
}

#[test]
fn floored_log_prob_has_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Array2::from_shape_vec((1, 2), vec![0.0, 60.0]).unwrap(), true);
    let lp = tape.weighted_log_prob(logits, &[0], &[1.0]).unwrap();
    assert_eq!(tape.floored_count(), 1);
    assert!((tape.scalar(lp) - tape::LOG_PROB_FLOOR).abs() < 1e-12);
    let grads = tape.backward(lp).unwrap();
    assert!(grads[logits.0].as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn constant_loss_has_zero_gradients() {
    let cfg = small_cfg(true, 0.0);
    let net = Dit::new(cfg.clone(), "").unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    let tokens = random_tokens(cfg.seq_len, cfg.vocab, 2);
    let (v, grads) = loss_gradients::<f64, _>(&store, None, |g| {
        net.forward(g, &tokens, &[0.5])?;
        Ok(g.input(Array2::from_elem((1, 1), 3.5)))
    })
    .unwrap();
    assert_eq!(v, 3.5);
    assert!(grads.same_layout(&store));
    assert_eq!(grads.sq_norm(), 0.0);
}

#[test]
fn squared_norm_probe_gradient_is_twice_the_weight() {
    let cfg = small_cfg(true, 0.0);
    let net = Dit::new(cfg, "").unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.5, 3);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names.iter().step_by(3) {
        let (v, grads) = loss_gradients::<f64, _>(&store, None, |g| {
            let w = g.param(name)?;
            let sq = g.tape.mul(w, w)?;
            Ok(g.tape.sum_all(sq))
        })
        .unwrap();
        let w = store.get(name).unwrap();
        assert!((v - w.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-9);
        for (gr, x) in grads.get(name).unwrap().iter().zip(w.iter()) {
            assert!((gr - 2.0 * x).abs() < 1e-12, "{name}");
        }
        assert_eq!(grads.sq_norm(), grads.get(name).unwrap().iter().map(|x| x * x).sum::<f64>());
    }
}

#[test]
fn latent_blocks_are_permutation_equivariant_without_positions() {
    let cfg = BackboneConfig { latent_blocks: 3, ..small_cfg(true, 0.0) };
    let net = MmDit::new(cfg.clone(), "", LatentInput::Projected, MmDitHeads::BOTH).unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 5);
    let pos = store.require("y.pos_emb").unwrap().clone();
    store.set("y.pos_emb", Array2::zeros(pos.dim())).unwrap();
    let tokens = random_tokens(cfg.seq_len, cfg.vocab, 6);
    let lat = random_matrix(cfg.latent_blocks, cfg.latent_dim, 7);
    let perm = [2usize, 0, 1];
    let permuted = Array2::from_shape_fn(lat.dim(), |(r, c)| lat[[perm[r], c]]);
    let run = |store: &ParameterStore, y: &Array2<f64>| {
        let mut g = Graph::<f64>::eval(store);
        let yv = g.input(y.clone());
        let out = net.forward(&mut g, &tokens, Some(yv), &[0.4]).unwrap();
        (g.tape.value(out.logits.unwrap()).clone(), g.tape.value(out.latents.unwrap()).clone())
    };
    let (la, ya) = run(&store, &lat);
    let (lb, yb) = run(&store, &permuted);
    for (a, b) in la.iter().zip(lb.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
    for r in 0..cfg.latent_blocks {
        for c in 0..cfg.latent_dim {
            assert!((yb[[r, c]] - ya[[perm[r], c]]).abs() < 1e-10);
        }
    }
    // with positions restored the blocks are no longer interchangeable
    store.set("y.pos_emb", pos).unwrap();
    let (_, ya) = run(&store, &lat);
    let (_, yb) = run(&store, &permuted);
    let moved = (0..cfg.latent_blocks)
        .flat_map(|r| (0..cfg.latent_dim).map(move |c| (r, c)))
        .map(|(r, c)| (yb[[r, c]] - ya[[perm[r], c]]).abs())
        .fold(0.0, f64::max);
    assert!(moved > 1e-6);
}

#[test]
fn eval_mode_is_bit_identical_and_ignores_dropout() {
    let cfg = small_cfg(true, 0.5);
    let net = MmDit::new(cfg.clone(), "", LatentInput::Projected, MmDitHeads::BOTH).unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 8);
    let tokens = random_tokens(2 * cfg.seq_len, cfg.vocab, 9);
    let lat = random_matrix(2 * cfg.latent_blocks, cfg.latent_dim, 10);
    let run = || {
        let mut g = Graph::<f32>::eval(&store);
        let yv = g.input(lat.clone());
        let out = net.forward(&mut g, &tokens, Some(yv), &[0.2, 0.9]).unwrap();
        (g.tape.value(out.logits.unwrap()).clone(), g.tape.value(out.latents.unwrap()).clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn latent_mlp_is_finite_for_large_inputs() {
    let cfg = small_cfg(true, 0.0);
    let net = LatentMlp::new(cfg.clone(), "lat.").unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 0.3, 11);
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let mut x = random_matrix(cfg.latent_blocks, cfg.latent_dim, 12);
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.mapv_inplace(|v| v * scale / n);
        let mut g = Graph::<f32>::eval(&store);
        let xv = g.input(x);
        let out = net.forward(&mut g, xv, &[0.7]).unwrap();
        assert!(g.tape.value(out).iter().all(|v| v.is_finite()), "scale {scale}");
    }
}

#[test]
fn predicted_distribution_sums_to_one_with_zero_mask_mass() {
    let cfg = small_cfg(true, 0.0);
    let net = MmDit::new(cfg.clone(), "", LatentInput::Projected, MmDitHeads::BOTH).unwrap();
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut StreamKey::root(1).rng()).unwrap();
    randomize(&mut store, 1.0, 13);
    let mut g = Graph::<f64>::eval(&store);
    let y = g.input(random_matrix(cfg.latent_blocks, cfg.latent_dim, 14));
    let out = net.forward(&mut g, &random_tokens(cfg.seq_len, cfg.vocab, 15), Some(y), &[0.5]).unwrap();
    let logits = g.tape.value(out.logits.unwrap());
    // one logit per non-mask token; the mask coordinate carries no mass
    assert_eq!(logits.ncols(), cfg.vocab - 1);
    let p = tape::softmax_rows(logits);
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}
