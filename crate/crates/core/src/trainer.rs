//! Training loop: AdamW with warmup, gradient clipping, EMA, the two-stage
//! latent-weight ramp, checkpoints and metric logging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;

use crate::backbone::{loss_gradients, BackboneConfig, Checkpoint, ParameterStore};
use crate::discrete::inverse_cdf;
use crate::encoder::{Encoder, DEFAULT_SIGMA_LAT_SQ};
use crate::error::{ensure, invalid, LddmError, Result};
use crate::lddm::{LddmModel, LossBreakdown, ModelFamily, ModelSpec, Schedules, Weighting};
use crate::metrics::validation_nelbo;
use crate::oracle::{builtin_targets, EnumerableTarget};
use crate::rng::{label, StreamKey};
use crate::sawtooth::{read_token_matrix, sample_sawtooth_batch, SawtoothConfig};
use crate::schedules::{ContinuousKind, ContinuousSchedule, MaskSchedule, MaskScheduleKind, WeightMode};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Stream label for the per-step loss noise.
const TRAIN: u64 = 13;
/// Prefixes of the extra tensors stored in a checkpoint.
pub const EMA_PREFIX: &str = "ema.";
const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

/// Where training sequences come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Fresh sawtooth draws every step.
    Sawtooth,
    /// Exact draws from a built-in enumerable target.
    Target(String),
    /// Rows of a token-matrix file, drawn uniformly with replacement.
    File(PathBuf),
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        if s == "sawtooth" {
            Ok(DataSource::Sawtooth)
        } else if let Some(name) = s.strip_prefix("target:") {
            Ok(DataSource::Target(name.to_string()))
        } else if let Some(p) = s.strip_prefix("file:") {
            Ok(DataSource::File(PathBuf::from(p)))
        } else {
            Err(invalid!("unknown data source `{s}` (expected sawtooth, target:<name> or file:<path>)"))
        }
    }

    fn render(&self) -> String {
        match self {
            DataSource::Sawtooth => "sawtooth".into(),
            DataSource::Target(n) => format!("target:{n}"),
            DataSource::File(p) => format!("file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub family: ModelFamily,
    pub data: DataSource,
    pub seq_len: usize,
    pub periods: usize,
    pub floor: f64,
    pub vocab: usize,
    pub mask_steps: usize,
    pub latent_steps: usize,
    pub latent_schedule: String,
    pub cosine_offset: f64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub latent_blocks: usize,
    pub latent_dim: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub sigma_lat_sq: f64,
    pub latent_depth: usize,
    pub data_weight: WeightMode,
    pub latent_weight: WeightMode,
    pub batch_size: usize,
    pub total_steps: usize,
    pub stage1_steps: usize,
    pub ramp_end: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Noise draws per validation sequence.
    pub eval_mc_draws: usize,
    pub checkpoint_every: usize,
    /// Encoder learning-rate multiplier ramps from 1 to 0 over
    /// `[encoder_freeze_start, encoder_freeze_end]`; 0 disables.
    pub encoder_freeze_start: usize,
    pub encoder_freeze_end: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            family: ModelFamily::Mdlm,
            data: DataSource::Sawtooth,
            seq_len: 32,
            periods: 2,
            floor: 0.01,
            vocab: 3,
            mask_steps: 1000,
            latent_steps: 1000,
            latent_schedule: "vp_cosine".into(),
            cosine_offset: 0.008,
            hidden: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.1,
            latent_blocks: 1,
            latent_dim: 32,
            enc_hidden: 64,
            enc_layers: 4,
            enc_heads: 4,
            sigma_lat_sq: DEFAULT_SIGMA_LAT_SQ,
            latent_depth: 3,
            data_weight: WeightMode::Elbo,
            latent_weight: WeightMode::Unit,
            batch_size: 256,
            total_steps: 5000,
            stage1_steps: 500,
            ramp_end: 2500,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 200,
            cosine_decay: false,
            ema_decay: 0.99,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 500,
            eval_samples: 1024,
            eval_mc_draws: 16,
            checkpoint_every: 1000,
            encoder_freeze_start: 0,
            encoder_freeze_end: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| LddmError::Parse(format!("`{key}` = `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(LddmError::Parse(format!("`{key}` = `{v}`: expected a boolean"))),
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),* $(,)?) => {
        impl TrainConfig {
            /// Recognized configuration keys, in file order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Set one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $(stringify!($key) => config_keys!(@set self, $key, $kind, value),)*
                    _ => return Err(LddmError::Parse(format!("unknown configuration key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its current value.
            pub fn to_pairs(&self) -> IndexMap<String, String> {
                let mut m = IndexMap::new();
                $(m.insert(stringify!($key).to_string(), config_keys!(@get self, $key, $kind));)*
                m
            }
        }
    };
    (@set $s:ident, $key:ident, plain, $v:ident) => { $s.$key = parse(stringify!($key), $v)? };
    (@set $s:ident, $key:ident, flag, $v:ident) => { $s.$key = parse_bool(stringify!($key), $v)? };
    (@set $s:ident, $key:ident, source, $v:ident) => { $s.$key = DataSource::parse($v)? };
    (@get $s:ident, $key:ident, source) => { $s.$key.render() };
    (@get $s:ident, $key:ident, $kind:ident) => { $s.$key.to_string() };
}

config_keys! {
    family: plain, data: source, seq_len: plain, periods: plain, floor: plain, vocab: plain,
    mask_steps: plain, latent_steps: plain, latent_schedule: plain, cosine_offset: plain,
    hidden: plain, layers: plain, heads: plain, mlp_ratio: plain, dropout: plain,
    latent_blocks: plain, latent_dim: plain, enc_hidden: plain, enc_layers: plain, enc_heads: plain,
    sigma_lat_sq: plain, latent_depth: plain, data_weight: plain, latent_weight: plain,
    batch_size: plain, total_steps: plain, stage1_steps: plain, ramp_end: plain,
    lr: plain, weight_decay: plain, warmup_steps: plain, cosine_decay: flag,
    ema_decay: plain, grad_clip: plain, seed: plain, eval_every: plain, eval_samples: plain,
    eval_mc_draws: plain, checkpoint_every: plain, encoder_freeze_start: plain, encoder_freeze_end: plain,
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LddmError::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| LddmError::Parse(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Apply `LDDM_<KEY>` overrides from the given environment.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, env: I) -> Result<()> {
        for (k, v) in env {
            if let Some(key) = k.strip_prefix("LDDM_") {
                let key = key.to_ascii_lowercase();
                if Self::KEYS.contains(&key.as_str()) {
                    self.set(&key, &v)?;
                }
            }
        }
        Ok(())
    }

    /// Config file plus process environment overrides, validated.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LddmError::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse_text(&text)?;
        cfg.apply_env(std::env::vars())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.stage1_steps <= self.ramp_end && self.ramp_end <= self.total_steps,
            invalid!(
                "need stage1_steps <= ramp_end <= total_steps, got {} / {} / {}",
                self.stage1_steps,
                self.ramp_end,
                self.total_steps
            )
        );
        ensure!(self.lr > 0.0 && self.lr.is_finite(), invalid!("learning rate must be positive"));
        ensure!(self.weight_decay >= 0.0, invalid!("weight decay must be non-negative"));
        ensure!((0.0..=1.0).contains(&self.ema_decay), invalid!("ema decay must lie in [0, 1]"));
        ensure!(self.grad_clip > 0.0, invalid!("gradient clip must be positive"));
        ensure!(self.batch_size >= 1, invalid!("batch size must be positive"));
        ensure!(self.eval_samples >= 1, invalid!("eval_samples must be positive"));
        ensure!(self.eval_mc_draws >= 1, invalid!("eval_mc_draws must be positive"));
        ensure!(
            self.encoder_freeze_start <= self.encoder_freeze_end,
            invalid!("encoder_freeze_start must not exceed encoder_freeze_end")
        );
        if self.family == ModelFamily::Fuji {
            ensure!(
                self.mask_steps == self.latent_steps,
                invalid!("fuji shares its time grid: mask_steps must equal latent_steps")
            );
        }
        self.schedules()?;
        self.model_spec()?.backbone.validate()?;
        Ok(())
    }

    pub fn schedules(&self) -> Result<Schedules> {
        Ok(Schedules {
            mask: MaskSchedule::new(self.mask_steps, MaskScheduleKind::Linear)?,
            latent: ContinuousSchedule::new(
                self.latent_steps,
                ContinuousKind::parse(&self.latent_schedule, self.cosine_offset)?,
            )?,
        })
    }

    pub fn weighting(&self) -> Weighting {
        Weighting { data: self.data_weight, latent: self.latent_weight }
    }

    pub fn sawtooth(&self) -> SawtoothConfig {
        SawtoothConfig { seq_len: self.seq_len, periods: self.periods, floor: self.floor }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let backbone = BackboneConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            vocab: self.vocab,
            seq_len: self.seq_len,
            latent_blocks: self.latent_blocks,
            latent_dim: self.latent_dim,
            time_conditioned: true,
        };
        let encoder = BackboneConfig {
            hidden: self.enc_hidden,
            layers: self.enc_layers,
            heads: self.enc_heads,
            ..backbone.clone()
        };
        Ok(ModelSpec {
            family: self.family,
            backbone,
            encoder,
            sigma_lat_sq: self.sigma_lat_sq,
            latent_depth: self.latent_depth,
        })
    }
}

/// Latent loss weight at update `step`: 0 through stage 1, a linear ramp to 1
/// at `ramp_end`, then 1.
pub fn lambda_latent_schedule(step: usize, stage1: usize, ramp_end: usize) -> f64 {
    if step < stage1 {
        0.0
    } else if step >= ramp_end {
        1.0
    } else {
        (step - stage1) as f64 / (ramp_end - stage1) as f64
    }
}

/// Learning rate at update `step` (1-based): linear warmup, then constant or
/// cosine decay to zero at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize, cosine: bool) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if !cosine || total <= warmup {
        return peak;
    }
    let frac = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `ema <- decay * ema + (1 - decay) * live`.
pub fn ema_update(ema: &mut ParameterStore, live: &ParameterStore, decay: f64) -> Result<()> {
    ema.check_layout(live)?;
    for ((_, e), (_, l)) in ema.iter_mut().zip(live.iter()) {
        e.zip_mut_with(l, |e, &l| *e = decay * *e + (1.0 - decay) * l);
    }
    Ok(())
}

/// Rescale `grads` so their global norm is at most `clip`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut ParameterStore, clip: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > clip {
        grads.scale(clip / norm);
    }
    norm
}

fn encoder_multiplier(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.encoder_freeze_end == 0 || step < cfg.encoder_freeze_start {
        1.0
    } else if step >= cfg.encoder_freeze_end || cfg.encoder_freeze_end == cfg.encoder_freeze_start {
        0.0
    } else {
        1.0 - (step - cfg.encoder_freeze_start) as f64 / (cfg.encoder_freeze_end - cfg.encoder_freeze_start) as f64
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub lambda_latent: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// EMA validation NELBO per token, when evaluated at this step.
    pub val_nelbo: Option<f64>,
}

pub const HISTORY_HEADER: &str = "step,lr,lambda_latent,loss,data_term,latent_term,grad_norm,floored,val_nelbo";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.4},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.step,
            self.lr,
            self.lambda_latent,
            self.loss.total,
            self.loss.data_term,
            self.loss.latent_term,
            self.grad_norm,
            self.loss.floored,
            self.val_nelbo.map(|v| format!("{v:.6}")).unwrap_or_default()
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct RunState {
    pub step: usize,
    pub params: ParameterStore,
    pub ema: ParameterStore,
    m: ParameterStore,
    v: ParameterStore,
    pub history: Vec<StepRecord>,
}

enum Sampler {
    Sawtooth(SawtoothConfig),
    Target(EnumerableTarget),
    Rows(Vec<u32>),
}

pub struct Trainer {
    cfg: TrainConfig,
    model: LddmModel,
    sch: Schedules,
    sampler: Sampler,
    val: Vec<u32>,
    root: StreamKey,
    state: RunState,
}

/// Look up a built-in enumerable target; `sawtooth_mini` follows the
/// configured sequence length.
pub fn target_by_name(name: &str, cfg: &TrainConfig) -> Result<EnumerableTarget> {
    if name == "sawtooth_mini" {
        return EnumerableTarget::sawtooth_mini(&cfg.sawtooth(), 8);
    }
    builtin_targets()?
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| invalid!("unknown target `{name}`"))
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sampler = match &cfg.data {
            DataSource::Sawtooth => {
                ensure!(cfg.vocab == 3, invalid!("sawtooth data is binary: vocab must be 3"));
                Sampler::Sawtooth(cfg.sawtooth())
            }
            DataSource::Target(name) => {
                let t = target_by_name(name, &cfg)?;
                ensure!(
                    t.seq_len() == cfg.seq_len && t.vocab() == cfg.vocab,
                    invalid!("target `{name}` has S={} K={}, config has S={} K={}", t.seq_len(), t.vocab(), cfg.seq_len, cfg.vocab)
                );
                Sampler::Target(t)
            }
            DataSource::File(p) => {
                let (tokens, s) = read_token_matrix(p)?;
                ensure!(s == cfg.seq_len, LddmError::ShapeMismatch(format!("data rows have length {s}, config says {}", cfg.seq_len)));
                ensure!(
                    tokens.iter().all(|&t| (t as usize) < cfg.vocab - 1),
                    invalid!("data contains tokens outside [0, {})", cfg.vocab - 1)
                );
                Sampler::Rows(tokens)
            }
        };
        let model = LddmModel::new(cfg.model_spec()?)?;
        let sch = cfg.schedules()?;
        let root = StreamKey::root(cfg.seed);
        let params = model.init_store(cfg.seed)?;
        let mut t = Trainer {
            val: Vec::new(),
            state: RunState {
                step: 0,
                ema: params.clone(),
                m: params.zeros_like(),
                v: params.zeros_like(),
                params,
                history: Vec::new(),
            },
            cfg,
            model,
            sch,
            sampler,
            root,
        };
        t.val = t.draw(t.cfg.eval_samples, &mut root.fork(label::EVAL).rng())?;
        Ok(t)
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<u32>> {
        match &self.sampler {
            Sampler::Sawtooth(c) => Ok(sample_sawtooth_batch(n, c, rng)?.tokens),
            Sampler::Target(t) => {
                let mut out = Vec::with_capacity(n * t.seq_len());
                for _ in 0..n {
                    out.extend(t.clean_tokens(inverse_cdf(t.q0(), rng.random())));
                }
                Ok(out)
            }
            Sampler::Rows(rows) => {
                let s = self.cfg.seq_len;
                let m = rows.len() / s;
                let mut out = Vec::with_capacity(n * s);
                for _ in 0..n {
                    let r = rng.random_range(0..m);
                    out.extend_from_slice(&rows[r * s..(r + 1) * s]);
                }
                Ok(out)
            }
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LddmModel {
        &self.model
    }

    pub fn schedules(&self) -> &Schedules {
        &self.sch
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn validation_set(&self) -> &[u32] {
        &self.val
    }

    /// One optimizer update on live parameters.
    pub fn step(&mut self) -> Result<StepRecord> {
        let k = self.state.step + 1;
        let cfg = &self.cfg;
        let x0 = self.draw(cfg.batch_size, &mut self.root.fork2(label::DATA, k as u64).rng())?;
        let lambda = if cfg.family.has_latents() {
            lambda_latent_schedule(k, cfg.stage1_steps, cfg.ramp_end)
        } else {
            0.0
        };
        let key = self.root.fork2(TRAIN, k as u64);
        let dropout = Some(self.root.fork2(label::DROPOUT, k as u64).rng());
        let (model, sch, w) = (&self.model, &self.sch, cfg.weighting());
        let mut breakdown = LossBreakdown::default();
        let (_, mut grads) = loss_gradients::<f32, _>(&self.state.params, dropout, |g| {
            let (total, b) = model.loss(g, &x0, sch, w, lambda, key)?;
            breakdown = b;
            Ok(total)
        })?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let clipped = grads.sq_norm().sqrt();
        assert!(clipped <= cfg.grad_clip * (1.0 + 1e-9), "clipped gradient norm {clipped} exceeds {}", cfg.grad_clip);

        let lr = learning_rate(k, cfg.lr, cfg.warmup_steps, cfg.total_steps, cfg.cosine_decay);
        let enc_mult = encoder_multiplier(cfg, k);
        let (bc1, bc2) = (1.0 - BETA1.powi(k as i32), 1.0 - BETA2.powi(k as i32));
        let st = &mut self.state;
        for ((((name, p), (_, g)), (_, m)), (_, v)) in
            st.params.iter_mut().zip(grads.iter()).zip(st.m.iter_mut()).zip(st.v.iter_mut())
        {
            let step_lr = if name.starts_with(Encoder::PREFIX) { lr * enc_mult } else { lr };
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *p -= step_lr * (update + cfg.weight_decay * *p);
            });
        }
        ema_update(&mut st.ema, &st.params, cfg.ema_decay)?;
        st.step = k;
        let rec = StepRecord { step: k, lr, lambda_latent: lambda, loss: breakdown, grad_norm, val_nelbo: None };
        st.history.push(rec);
        Ok(rec)
    }

    /// Per-token validation NELBO of the EMA parameters.
    pub fn evaluate(&self, mc_draws: usize) -> Result<f64> {
        let key = self.root.fork2(label::EVAL, self.state.step as u64);
        Ok(validation_nelbo(&self.model, &self.state.ema, &self.sch, &self.val, mc_draws, key)?.per_token)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let st = &self.state;
        let mut tensors = st.params.clone();
        for (prefix, store) in [(EMA_PREFIX, &st.ema), (M_PREFIX, &st.m), (V_PREFIX, &st.v)] {
            tensors.extend(store.with_prefix(prefix)).expect("prefixed names are fresh");
        }
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), st.step.to_string());
        for (k, v) in self.cfg.to_pairs() {
            if !v.is_empty() && !v.contains(char::is_whitespace) {
                meta.insert(format!("cfg.{k}"), v);
            }
        }
        Checkpoint { meta, tensors }
    }

    fn dump_diagnostics(&self, dir: &Path, err: &LddmError) {
        let mut s = format!("error: {err}\nstep: {}\n", self.state.step);
        for (name, p) in self.state.params.iter() {
            let finite = p.iter().all(|v| v.is_finite());
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let _ = writeln!(s, "param {name} norm={norm:.6e} finite={finite}");
        }
        s.push_str(HISTORY_HEADER);
        s.push('\n');
        for r in self.state.history.iter().rev().take(20).rev() {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        let _ = std::fs::write(dir.join("diagnostics.txt"), s);
    }

    /// Train to `total_steps`. With an output directory, writes the metric
    /// history, periodic checkpoints (last two kept) and `final.ckpt`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d)?;
        }
        let mut log = match out_dir {
            Some(d) => {
                let mut f = std::io::BufWriter::new(std::fs::File::create(d.join("train_metrics.csv"))?);
                writeln!(f, "{HISTORY_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        let mut kept: Vec<PathBuf> = Vec::new();
        while self.state.step < self.cfg.total_steps {
            let mut rec = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    if let Some(d) = out_dir {
                        self.dump_diagnostics(d, &e);
                    }
                    return Err(e);
                }
            };
            let k = rec.step;
            if self.cfg.eval_every > 0 && (k % self.cfg.eval_every == 0 || k == self.cfg.total_steps) {
                rec.val_nelbo = Some(self.evaluate(self.cfg.eval_mc_draws)?);
                *self.state.history.last_mut().expect("step recorded") = rec;
            }
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", rec.csv_row())?;
            }
            if let Some(d) = out_dir {
                if self.cfg.checkpoint_every > 0 && k % self.cfg.checkpoint_every == 0 && k < self.cfg.total_steps {
                    let p = d.join(format!("step_{k:07}.ckpt"));
                    self.checkpoint().write(&p)?;
                    kept.push(p);
                    if kept.len() > 2 {
                        let old = kept.remove(0);
                        std::fs::remove_file(old)?;
                    }
                }
            }
        }
        if let Some(f) = log.as_mut() {
            f.flush()?;
        }
        if let Some(d) = out_dir {
            self.checkpoint().write(&d.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Build a trainer and run it to completion.
pub fn train_run(cfg: TrainConfig, out_dir: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg)?;
    t.run(out_dir)?;
    Ok(t)
}

/// Model, schedules and EMA parameters restored from a checkpoint.
pub struct LoadedModel {
    pub config: TrainConfig,
    pub model: LddmModel,
    pub schedules: Schedules,
    pub ema: ParameterStore,
    pub step: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::read(path)?;
    let mut cfg = TrainConfig::default();
    for (k, v) in &ck.meta {
        if let Some(key) = k.strip_prefix("cfg.") {
            cfg.set(key, v)?;
        }
    }
    let step = ck.meta.get("step").map(|s| parse::<usize>("step", s)).transpose()?.unwrap_or(0);
    let model = LddmModel::new(cfg.model_spec()?)?;
    let ema = ck.tensors.strip_prefix(EMA_PREFIX);
    let expected = model.init_store(0)?;
    expected
        .check_layout(&ema)
        .map_err(|_| LddmError::ShapeMismatch(format!("{}: EMA parameters do not match the configured model", path.display())))?;
    Ok(LoadedModel { schedules: cfg.schedules()?, config: cfg, model, ema, step })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(family: ModelFamily) -> TrainConfig {
        TrainConfig {
            family,
            seq_len: 8,
            mask_steps: 100,
            latent_steps: 100,
            hidden: 16,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            latent_dim: 4,
            enc_hidden: 16,
            enc_layers: 1,
            enc_heads: 2,
            latent_depth: 2,
            batch_size: 16,
            total_steps: 20,
            stage1_steps: 5,
            ramp_end: 10,
            warmup_steps: 5,
            eval_every: 10,
            eval_samples: 32,
            checkpoint_every: 5,
            ..Default::default()
        }
    }

    #[test]
    fn lambda_schedule_examples() {
        assert_eq!(lambda_latent_schedule(0, 1000, 5000), 0.0);
        assert_eq!(lambda_latent_schedule(999, 1000, 5000), 0.0);
        assert_eq!(lambda_latent_schedule(3000, 1000, 5000), 0.5);
        assert_eq!(lambda_latent_schedule(9999, 1000, 5000), 1.0);
        assert_eq!(lambda_latent_schedule(7, 7, 7), 1.0);
    }

    #[test]
    fn warmup_is_linear() {
        assert_eq!(learning_rate(100, 1e-3, 200, 5000, false), 0.5e-3);
        assert_eq!(learning_rate(200, 1e-3, 200, 5000, false), 1e-3);
        assert_eq!(learning_rate(4000, 1e-3, 200, 5000, false), 1e-3);
        assert!((learning_rate(2600, 1e-3, 200, 5000, true) - 0.5e-3).abs() < 1e-15);
        assert!(learning_rate(5000, 1e-3, 200, 5000, true).abs() < 1e-15);
    }

    #[test]
    fn ema_examples() {
        let mut rng = StreamKey::root(1).rng();
        let mut live = ParameterStore::new();
        live.init_normal("a", 2, 3, 1.0, &mut rng).unwrap();
        let mut ema = live.zeros_like();
        ema_update(&mut ema, &live, 1.0).unwrap();
        assert_eq!(ema.sq_norm(), 0.0);
        ema_update(&mut ema, &live, 0.0).unwrap();
        assert_eq!(ema, live);
        let mut ema = live.zeros_like();
        let gap0 = live.sq_norm().sqrt();
        for n in 1..=10 {
            ema_update(&mut ema, &live, 0.9).unwrap();
            let mut diff = ema.clone();
            diff.scale(-1.0);
            diff.add_assign(&live).unwrap();
            assert!((diff.sq_norm().sqrt() - gap0 * 0.9f64.powi(n)).abs() < 1e-12);
        }
        let mut other = ParameterStore::new();
        other.init_zeros("b", 2, 3).unwrap();
        assert!(ema_update(&mut ema, &other, 0.5).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut rng = StreamKey::root(2).rng();
        let mut g = ParameterStore::new();
        g.init_normal("a", 10, 10, 1.0, &mut rng).unwrap();
        let before = clip_global_norm(&mut g, 0.5);
        assert!(before > 0.5);
        assert!((g.sq_norm().sqrt() - 0.5).abs() < 1e-12);
        let mut small = g.clone();
        small.scale(0.1);
        let n = small.sq_norm();
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small.sq_norm(), n);
    }

    #[test]
    fn config_text_and_env_overrides() {
        let text = "# comment\nfamily = fuji\nlr = 0.002 # inline\n\ndata = target:correlated_pair\ncosine_decay = true\n";
        let mut cfg = TrainConfig::parse_text(text).unwrap();
        assert_eq!(cfg.family, ModelFamily::Fuji);
        assert_eq!(cfg.lr, 0.002);
        assert!(cfg.cosine_decay);
        assert_eq!(cfg.data, DataSource::Target("correlated_pair".into()));
        cfg.apply_env([("LDDM_LR".to_string(), "0.5".to_string()), ("OTHER".to_string(), "x".to_string())])
            .unwrap();
        assert_eq!(cfg.lr, 0.5);
        let back = TrainConfig::parse_text(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::parse_text("bogus = 1").is_err());
        assert!(TrainConfig::parse_text("lr").is_err());
        let bad = TrainConfig { stage1_steps: 10, ramp_end: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().eval_mc_draws, 16);
        assert_eq!(TrainConfig::parse_text("eval_mc_draws = 4").unwrap().eval_mc_draws, 4);
        assert!(TrainConfig::parse_text("eval_mc_draws = 0").and_then(|c| c.validate()).is_err());
    }

    #[test]
    fn runs_are_deterministic_and_checkpoints_rotate() {
        let dir = tempfile::tempdir().unwrap();
        let a = train_run(tiny(ModelFamily::Fuji), Some(dir.path())).unwrap();
        let b = train_run(tiny(ModelFamily::Fuji), None).unwrap();
        assert_eq!(a.state().params.checksum(), b.state().params.checksum());
        assert_eq!(a.state().ema.checksum(), b.state().ema.checksum());
        let mut ckpts: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".ckpt"))
            .collect();
        ckpts.sort();
        assert_eq!(ckpts, ["final.ckpt", "step_0000010.ckpt", "step_0000015.ckpt"]);
        let csv = std::fs::read_to_string(dir.path().join("train_metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 21);
        let loaded = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(loaded.step, 20);
        assert_eq!(loaded.config, tiny(ModelFamily::Fuji));
        assert_eq!(loaded.ema.checksum(), a.state().ema.checksum());
        for r in &a.state().history {
            let sum = r.loss.data_term + r.lambda_latent * r.loss.latent_term;
            assert!((r.loss.total - sum).abs() <= 1e-5 * sum.abs().max(1.0));
            assert_eq!(r.lambda_latent, lambda_latent_schedule(r.step, 5, 10));
        }
    }

    #[test]
    fn encoder_freeze_stops_encoder_updates() {
        let cfg = TrainConfig { encoder_freeze_start: 2, encoder_freeze_end: 4, ..tiny(ModelFamily::Seq) };
        let mut t = Trainer::new(cfg).unwrap();
        for _ in 0..4 {
            t.step().unwrap();
        }
        let enc_before = t.state().params.strip_prefix(Encoder::PREFIX);
        let other_before = t.state().params.strip_prefix("data.");
        t.step().unwrap();
        assert_eq!(t.state().params.strip_prefix(Encoder::PREFIX), enc_before);
        assert_ne!(t.state().params.strip_prefix("data."), other_before);
    }

    #[test]
    fn mdlm_loss_decreases() {
        // Independent bits with P(1) = 0.2, 0.5, 0.9: the per-token floor is
        // about 0.506 nats against ln 2 at initialization.
        let cfg = TrainConfig {
            data: DataSource::Target("independent".into()),
            seq_len: 3,
            total_steps: 500,
            eval_every: 0,
            dropout: 0.0,
            batch_size: 32,
            ..tiny(ModelFamily::Mdlm)
        };
        let t = train_run(cfg, None).unwrap();
        let h = &t.state().history;
        let mean = |r: &[StepRecord]| r.iter().map(|x| x.loss.total).sum::<f64>() / r.len() as f64;
        let (first, last) = (mean(&h[..50]), mean(&h[450..]));
        assert!(last < 0.9 * first, "{first} -> {last}");
    }
}
