use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::*;
use crate::backbone::{BackboneConfig, Graph, ParameterStore};
use crate::continuous::LatentState;
use crate::discrete::{CategoricalField, TokenSequence};
use crate::error::Result;
use crate::oracle::{EnumerableTarget, TruePosterior};
use crate::rng::{label, StreamKey};
use crate::schedules::{ContinuousKind, ContinuousSchedule, MaskSchedule, MaskScheduleKind, WeightMode};
use crate::testutil::{check_gradients, randomize};

fn toy_backbone(seq_len: usize, dropout: f64) -> BackboneConfig {
    BackboneConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        dropout,
        vocab: 3,
        seq_len,
        latent_blocks: 1,
        latent_dim: 4,
        time_conditioned: true,
    }
}

fn toy_model(family: ModelFamily, seq_len: usize, dropout: f64) -> LddmModel {
    let bb = toy_backbone(seq_len, dropout);
    LddmModel::new(ModelSpec { family, backbone: bb.clone(), encoder: bb, sigma_lat_sq: 1e-4, latent_depth: 2 })
        .unwrap()
}

fn schedules(t: usize) -> Schedules {
    Schedules {
        mask: MaskSchedule::new(t, MaskScheduleKind::Linear).unwrap(),
        latent: ContinuousSchedule::new(t, ContinuousKind::VpCosine { s_offset: 0.008 }).unwrap(),
    }
}

fn random_bits(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = StreamKey::root(seed).rng();
    (0..n).map(|_| rng.random_range(0..2)).collect()
}

fn family_gradients(family: ModelFamily) {
    let model = toy_model(family, 2, 0.1);
    let mut store = model.init_store(1).unwrap();
    randomize(&mut store, 0.3, 2);
    let sch = schedules(50);
    let x0 = random_bits(2 * 4, 3);
    let key = StreamKey::root(4);
    check_gradients(&store, Some(5), 60, |g| {
        let (total, _) = model.loss(g, &x0, &sch, Weighting::default(), 0.7, key)?;
        Ok(total)
    });
}

#[test]
fn fuji_loss_gradients_match_finite_differences() {
    family_gradients(ModelFamily::Fuji);
}

#[test]
fn seq_loss_gradients_match_finite_differences() {
    family_gradients(ModelFamily::Seq);
}

#[test]
fn mdlm_loss_gradients_match_finite_differences() {
    family_gradients(ModelFamily::Mdlm);
}

fn breakdown(model: &LddmModel, store: &ParameterStore, x0: &[u32], w: Weighting, lambda: f64, key: StreamKey) -> LossBreakdown {
    let sch = schedules(100);
    let mut g = Graph::<f64>::eval(store);
    model.loss(&mut g, x0, &sch, w, lambda, key).unwrap().1
}

#[test]
fn breakdown_identity_and_stage_one() {
    for family in [ModelFamily::Fuji, ModelFamily::Seq] {
        let model = toy_model(family, 4, 0.0);
        let mut store = model.init_store(1).unwrap();
        randomize(&mut store, 0.2, 9);
        let x0 = random_bits(4 * 6, 10);
        let key = StreamKey::root(11);
        let b = breakdown(&model, &store, &x0, Weighting::default(), 0.35, key);
        assert_eq!(b.total, b.data_term + 0.35 * b.latent_term);
        assert!(b.latent_term > 0.0);
        let zero = breakdown(&model, &store, &x0, Weighting::default(), 0.0, key);
        assert_eq!(zero.total, zero.data_term);
        assert_eq!(zero.data_term, b.data_term);
    }
}

#[test]
fn elbo_weighting_rescales_unit_terms_by_inverse_time() {
    let model = toy_model(ModelFamily::Mdlm, 4, 0.0);
    let mut store = model.init_store(1).unwrap();
    randomize(&mut store, 0.2, 3);
    let x0 = random_bits(4, 5);
    for seed in 0..20u64 {
        let key = StreamKey::root(seed);
        let t = key.fork(label::TIME).rng().random_range(1..=100usize);
        let unit = Weighting { data: WeightMode::Unit, latent: WeightMode::Unit };
        let u = breakdown(&model, &store, &x0, unit, 0.0, key);
        let e = breakdown(&model, &store, &x0, Weighting::default(), 0.0, key);
        if u.data_term == 0.0 {
            assert_eq!(e.data_term, 0.0);
        } else {
            assert!((e.data_term / u.data_term - 1.0 / t as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn fuji_without_latent_weight_matches_mdlm_at_initialization() {
    // Zero-initialized heads give uniform predictions in both families, so
    // the data terms must agree exactly when the time and mask draws agree.
    let mdlm = toy_model(ModelFamily::Mdlm, 4, 0.0);
    let fuji = toy_model(ModelFamily::Fuji, 4, 0.0);
    let sm = mdlm.init_store(1).unwrap();
    let sf = fuji.init_store(1).unwrap();
    let x0 = random_bits(4 * 8, 6);
    for seed in 0..5 {
        let key = StreamKey::root(seed);
        let a = breakdown(&mdlm, &sm, &x0, Weighting::default(), 0.0, key);
        let b = breakdown(&fuji, &sf, &x0, Weighting::default(), 0.0, key);
        assert!((a.data_term - b.data_term).abs() < 1e-12);
        assert_eq!(b.total, b.data_term);
    }
}

#[test]
fn family_mismatch_is_rejected() {
    let model = toy_model(ModelFamily::Mdlm, 2, 0.0);
    let store = model.init_store(1).unwrap();
    let sch = schedules(10);
    let mut g = Graph::<f64>::eval(&store);
    let x0 = [0, 1];
    assert!(fuji_loss(&mut g, &model, &x0, &sch, Weighting::default(), 0.0, StreamKey::root(1)).is_err());
    assert!(mdlm_loss(&mut g, &model, &x0, &sch, WeightMode::Elbo, StreamKey::root(1)).is_ok());
    assert!(model.loss(&mut g, &[0, 1, 0], &sch, Weighting::default(), 0.0, StreamKey::root(1)).is_err());
    assert!(model.loss(&mut g, &x0, &sch, Weighting::default(), 1.5, StreamKey::root(1)).is_err());
}

fn skewed_pair() -> EnumerableTarget {
    EnumerableTarget::new("skewed", 2, 3, vec![0.1, 0.2, 0.3, 0.4]).unwrap()
}

fn histogram(samples: &Samples) -> HashMap<Vec<u32>, usize> {
    let mut h = HashMap::new();
    for s in &samples.tokens {
        *h.entry(s.tokens().to_vec()).or_insert(0) += 1;
    }
    h
}

fn total_variation(h: &HashMap<Vec<u32>, usize>, target: &EnumerableTarget, n: usize) -> f64 {
    let mut tv = 0.0;
    for (idx, &p) in target.q0().iter().enumerate() {
        let c = *h.get(&target.clean_tokens(idx)).unwrap_or(&0);
        tv += (c as f64 / n as f64 - p).abs();
    }
    0.5 * tv
}

#[test]
fn full_budget_oracle_sampling_recovers_target() {
    let target = skewed_pair();
    let t = 200;
    let ms = MaskSchedule::new(t, MaskScheduleKind::Linear).unwrap();
    let grid = make_time_grid(t, t).unwrap();
    let n = 100_000;
    let mut pred = TruePosterior::new(&target);
    let out = mdlm_sample(&mut pred, &grid, n, 2, 3, &ms, &mut StreamKey::root(1).rng()).unwrap();
    assert_eq!(out.nfe, t);
    let tv = total_variation(&histogram(&out), &target, n);
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn single_step_sampling_draws_from_marginals() {
    let target = skewed_pair();
    let ms = MaskSchedule::new(10, MaskScheduleKind::Linear).unwrap();
    let grid = make_time_grid(10, 1).unwrap();
    let n = 100_000;
    let mut pred = TruePosterior::new(&target);
    let out = mdlm_sample(&mut pred, &grid, n, 2, 3, &ms, &mut StreamKey::root(2).rng()).unwrap();
    assert_eq!(out.nfe, 1);
    // Marginals: P(x1 = 1) = 0.7, P(x2 = 1) = 0.6, drawn independently.
    let h = histogram(&out);
    for (seq, p) in [(vec![0, 0], 0.12), (vec![0, 1], 0.18), (vec![1, 0], 0.28), (vec![1, 1], 0.42)] {
        let f = *h.get(&seq).unwrap_or(&0) as f64 / n as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((f - p).abs() < 3.0 * sd, "{seq:?}: {f} vs {p}");
    }
}

#[test]
fn sampling_is_deterministic() {
    let target = skewed_pair();
    let ms = MaskSchedule::new(20, MaskScheduleKind::Linear).unwrap();
    let grid = make_time_grid(20, 5).unwrap();
    let run = || {
        let mut pred = TruePosterior::new(&target);
        mdlm_sample(&mut pred, &grid, 50, 2, 3, &ms, &mut StreamKey::root(3).rng()).unwrap().tokens
    };
    assert_eq!(run(), run());
}

/// Joint predictor that ignores the latent channel.
struct IgnoreLatent(TruePosterior);

impl JointPredictor for IgnoreLatent {
    fn predict_joint(
        &mut self,
        xt: &[TokenSequence],
        yt: &[LatentState],
        t: usize,
    ) -> Result<(Vec<CategoricalField>, Vec<LatentState>)> {
        Ok((self.0.predict_tokens(xt, t)?, yt.to_vec()))
    }
}

#[test]
fn joint_sampling_without_latent_dimensions_reduces_to_mdlm() {
    let target = skewed_pair();
    let sch = schedules(40);
    let grid = make_time_grid(40, 8).unwrap();
    let mut joint = IgnoreLatent(TruePosterior::new(&target));
    let a = fuji_sample(&mut joint, &grid, 300, 2, 3, (1, 0), &sch, LatentStep::Ancestral, &mut StreamKey::root(4).rng())
        .unwrap();
    let mut pred = TruePosterior::new(&target);
    let b = mdlm_sample(&mut pred, &grid, 300, 2, 3, &sch.mask, &mut StreamKey::root(4).rng()).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.nfe, 8);
    let mut joint = IgnoreLatent(TruePosterior::new(&target));
    let c = fuji_sample(&mut joint, &grid, 10, 2, 3, (2, 3), &sch, LatentStep::Ddim { eta: 0.0 }, &mut StreamKey::root(4).rng())
        .unwrap();
    assert_eq!(c.nfe, 8);
    assert_eq!(c.latents.len(), 10);
}

struct CountingLatent(Rc<Cell<usize>>);

impl LatentPredictor for CountingLatent {
    fn predict_latent(&mut self, yt: &[LatentState], _t: usize) -> Result<Vec<LatentState>> {
        self.0.set(self.0.get() + 1);
        Ok(yt.iter().map(|_| LatentState::new(vec![0.6, 0.8], 1, 2).unwrap()).collect())
    }
}

struct CountingData {
    latent_calls: Rc<Cell<usize>>,
    expect_latent_calls: usize,
    calls: usize,
    inner: TruePosterior,
}

impl ConditionalPredictor for CountingData {
    fn predict_given(&mut self, xt: &[TokenSequence], y0: &[LatentState]) -> Result<Vec<CategoricalField>> {
        assert_eq!(self.latent_calls.get(), self.expect_latent_calls);
        for y in y0 {
            assert!((y.block_norms()[0] - 1.0).abs() < 1e-12);
        }
        self.calls += 1;
        self.inner.predict_tokens(xt, 0)
    }
}

#[test]
fn sequential_sampling_accounts_evaluations() {
    let target = skewed_pair();
    let sch = schedules(64);
    let lgrid = make_time_grid(64, 16).unwrap();
    let dgrid = make_time_grid(64, 2).unwrap();
    let counter = Rc::new(Cell::new(0));
    let mut lat = CountingLatent(counter.clone());
    let mut data = CountingData {
        latent_calls: counter.clone(),
        expect_latent_calls: 16,
        calls: 0,
        inner: TruePosterior::new(&target),
    };
    let out = seq_sample(
        &mut lat,
        &mut data,
        &lgrid,
        &dgrid,
        20,
        2,
        3,
        (1, 2),
        &sch,
        LatentStep::Ancestral,
        &mut StreamKey::root(5).rng(),
    )
    .unwrap();
    assert_eq!(out.nfe, 18);
    assert_eq!(out.data_steps, 2);
    assert_eq!(data.calls, 2);
    assert_eq!(counter.get(), 16);
    for y in &out.latents {
        assert!((y.data()[0] - 0.6).abs() < 1e-12 && (y.data()[1] - 0.8).abs() < 1e-12);
    }
}

#[test]
fn grid_must_match_schedule() {
    let target = skewed_pair();
    let ms = MaskSchedule::new(10, MaskScheduleKind::Linear).unwrap();
    let grid = make_time_grid(20, 5).unwrap();
    let mut pred = TruePosterior::new(&target);
    assert!(mdlm_sample(&mut pred, &grid, 5, 2, 3, &ms, &mut StreamKey::root(1).rng()).is_err());
}

#[test]
fn network_sampling_runs_for_every_family() {
    for family in ModelFamily::ALL {
        let model = toy_model(family, 4, 0.1);
        let mut store = model.init_store(1).unwrap();
        randomize(&mut store, 0.2, 2);
        let sch = schedules(20);
        let plan = SamplePlan { budget: 4, latent_steps: 5, latent_step: LatentStep::Ancestral };
        let a = sample_model(&model, &store, &sch, plan, 7, &mut StreamKey::root(3).rng()).unwrap();
        let b = sample_model(&model, &store, &sch, plan, 7, &mut StreamKey::root(3).rng()).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.tokens.iter().all(|s| s.masked_count() == 0));
        let expect = if family == ModelFamily::Seq { 9 } else { 4 };
        assert_eq!(a.nfe, expect, "{family}");
    }
}
