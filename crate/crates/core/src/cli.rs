//! Command-line front end: data generation, training, sampling, evaluation,
//! oracle reports and budget sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::error::{ensure, invalid, LddmError, Result};
use crate::lddm::{sample_model, LatentStep, ModelFamily, SamplePlan};
use crate::metrics::{append_csv, positional_entropy, sliced_wasserstein, tokens_to_matrix, validation_nelbo, MetricReport};
use crate::oracle::{builtin_targets, format_report, oracle_row};
use crate::rng::{label, StreamKey};
use crate::sawtooth::{read_token_matrix, sample_sawtooth_batch, write_token_matrix, SawtoothConfig};
use crate::schedules::{MaskSchedule, MaskScheduleKind};
use crate::trainer::{load_checkpoint, train_run, LoadedModel, TrainConfig};

pub const DEFAULT_BUDGETS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

#[derive(Debug, Parser)]
#[command(name = "lddm", version, about = "Latent discrete diffusion on synthetic sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write sawtooth sequences as a token matrix.
    GenData(GenDataArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Draw samples from a checkpoint's EMA weights.
    Sample(SampleArgs),
    /// Metric rows for generated samples against a reference set.
    Eval(EvalArgs),
    /// Factorization bounds on the built-in enumerable targets.
    Oracle(OracleArgs),
    /// Evaluate several checkpoints over a budget list.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 2)]
    pub periods: usize,
    #[arg(long, default_value_t = 0.01)]
    pub floor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// `key=value` overrides applied after the file and environment.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplingArgs {
    /// Latent steps of the SEQ latent chain.
    #[arg(long, default_value_t = 64)]
    pub latent_steps: usize,
    /// Use DDIM latent updates with this eta instead of ancestral steps.
    #[arg(long)]
    pub ddim_eta: Option<f64>,
}

impl SamplingArgs {
    fn step(&self) -> Result<LatentStep> {
        match self.ddim_eta {
            None => Ok(LatentStep::Ancestral),
            Some(eta) if (0.0..=1.0).contains(&eta) => Ok(LatentStep::Ddim { eta }),
            Some(eta) => Err(invalid!("ddim eta {eta} outside [0, 1]")),
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference token matrix.
    #[arg(long)]
    pub reference: PathBuf,
    /// Pre-generated samples; evaluated as a single row.
    #[arg(long, conflicts_with = "checkpoint")]
    pub generated: Option<PathBuf>,
    /// Checkpoint to sample from at every budget.
    #[arg(long, required_unless_present = "generated")]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated data-step budgets.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS)]
    pub budgets: Vec<usize>,
    /// Samples per budget; the reference is truncated to match.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub dirs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "run")]
    pub run_id: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Noise draws per reference sequence for the NELBO column.
    #[arg(long, default_value_t = 16)]
    pub mc_draws: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Steps of the linear mask schedule.
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    /// Report a single target as `key = value` lines.
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `family=checkpoint` pairs, e.g. `mdlm=runs/mdlm/final.ckpt`.
    #[arg(long = "model", value_name = "FAMILY=PATH", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS)]
    pub budgets: Vec<usize>,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 500)]
    pub dirs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sweep")]
    pub run_id: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Noise draws per reference sequence for the NELBO column.
    #[arg(long, default_value_t = 16)]
    pub mc_draws: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

/// Parse arguments, run, and map the outcome to an exit code. Errors are
/// reported as a single line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lddm: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::Oracle(a) => {
            print!("{}", oracle_text(&a)?);
            Ok(())
        }
        Command::Sweep(a) => sweep(&a),
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Manifest next to `output`: command, seed, config snapshot and input digests.
fn write_manifest(output: &Path, command: &str, seed: u64, config: Option<&str>, inputs: &[&Path]) -> Result<()> {
    let mut s = format!("command = {command}\nseed = {seed}\nversion = {}\n", env!("CARGO_PKG_VERSION"));
    for p in inputs {
        let _ = writeln!(s, "input {} sha256 {}", p.display(), file_digest(p)?);
    }
    if let Some(c) = config {
        s.push_str("[config]\n");
        s.push_str(c);
    }
    let path = if output.is_dir() {
        output.join("manifest.txt")
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest");
        output.with_file_name(name)
    };
    std::fs::write(path, s)?;
    Ok(())
}

/// The `[config]` section of a manifest, or the whole text for a plain config,
/// so a training manifest can be replayed as a config file.
fn config_section(text: &str) -> &str {
    match text.find("\n[config]\n") {
        Some(i) => &text[i + "\n[config]\n".len()..],
        None => text,
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SawtoothConfig { seq_len: a.seq_len, periods: a.periods, floor: a.floor };
    let batch = sample_sawtooth_batch(a.n, &cfg, &mut StreamKey::root(a.seed).fork(label::DATA).rng())?;
    write_token_matrix(&a.out, &batch.tokens, a.seq_len, true)?;
    let snapshot = format!("n = {}\nseq_len = {}\nperiods = {}\nfloor = {}\n", a.n, a.seq_len, a.periods, a.floor);
    write_manifest(&a.out, "gen-data", a.seed, Some(&snapshot), &[])
}

fn train(a: &TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| invalid!("cannot read config {}: {e}", a.config.display()))?;
    let mut cfg = TrainConfig::parse_text(config_section(&text))?;
    cfg.apply_env(std::env::vars())?;
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| invalid!("override `{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.out)?;
    let started = Instant::now();
    let t = train_run(cfg.clone(), Some(&a.out))?;
    let last = t.state().history.last().copied();
    write_manifest(&a.out, "train", cfg.seed, Some(&cfg.render()), &[&a.config])?;
    if let Some(r) = last {
        println!(
            "trained {} for {} steps in {:.1}s: final loss {:.4}",
            cfg.family,
            r.step,
            started.elapsed().as_secs_f64(),
            r.loss.total
        );
    }
    Ok(())
}

fn plan(loaded: &LoadedModel, budget: usize, s: &SamplingArgs) -> Result<SamplePlan> {
    ensure!(
        budget >= 1 && budget <= loaded.schedules.mask.steps(),
        invalid!("budget {budget} outside [1, {}]", loaded.schedules.mask.steps())
    );
    Ok(SamplePlan { budget, latent_steps: s.latent_steps, latent_step: s.step()? })
}

fn sample(a: &SampleArgs) -> Result<()> {
    let loaded = load_checkpoint(&a.checkpoint)?;
    let p = plan(&loaded, a.budget, &a.sampling)?;
    let mut rng = StreamKey::root(a.seed).fork2(label::SAMPLE, a.budget as u64).rng();
    let out = sample_model(&loaded.model, &loaded.ema, &loaded.schedules, p, a.n, &mut rng)?;
    let tokens: Vec<u32> = out.tokens.into_iter().flat_map(|s| s.into_tokens()).collect();
    write_token_matrix(&a.out, &tokens, loaded.model.seq_len(), true)?;
    let snapshot = format!("n = {}\nbudget = {}\nnfe = {}\n{}", a.n, a.budget, out.nfe, loaded.config.render());
    write_manifest(&a.out, "sample", a.seed, Some(&snapshot), &[&a.checkpoint])
}

/// Rows of `tokens` (row length `s`) truncated to `n` rows.
fn head(tokens: &[u32], s: usize, n: usize) -> &[u32] {
    &tokens[..(n * s).min(tokens.len())]
}

fn swd_row(generated: &[u32], reference: &[u32], s: usize, dirs: usize, key: StreamKey) -> Result<f64> {
    let n = (generated.len() / s).min(reference.len() / s);
    ensure!(n >= 1, invalid!("need at least one generated and one reference row"));
    let a = tokens_to_matrix(head(generated, s, n), s)?;
    let b = tokens_to_matrix(head(reference, s, n), s)?;
    sliced_wasserstein(&a, &b, dirs, &mut key.fork(label::SWD).rng())
}

/// Metric rows of one checkpoint over `budgets`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_checkpoint(
    loaded: &LoadedModel,
    reference: &[u32],
    budgets: &[usize],
    n: usize,
    dirs: usize,
    seed: u64,
    run_id: &str,
    mc_draws: usize,
    sampling: &SamplingArgs,
) -> Result<Vec<MetricReport>> {
    let s = loaded.model.seq_len();
    ensure!(
        !reference.is_empty() && reference.len().is_multiple_of(s),
        LddmError::ShapeMismatch(format!("reference rows do not have the model's length {s}"))
    );
    let root = StreamKey::root(seed);
    let nelbo = validation_nelbo(&loaded.model, &loaded.ema, &loaded.schedules, head(reference, s, n.min(1024)), mc_draws, root.fork(label::EVAL))?;
    let mut rows = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let p = plan(loaded, b, sampling)?;
        let started = Instant::now();
        let mut rng = root.fork2(label::SAMPLE, b as u64).rng();
        let out = sample_model(&loaded.model, &loaded.ema, &loaded.schedules, p, n, &mut rng)?;
        let wall = started.elapsed().as_secs_f64();
        let tokens: Vec<u32> = out.tokens.into_iter().flat_map(|s| s.into_tokens()).collect();
        rows.push(MetricReport {
            run_id: run_id.to_string(),
            model: loaded.model.family().to_string(),
            budget: out.data_steps,
            nfe: out.nfe,
            swd: swd_row(&tokens, reference, s, dirs, root.fork(b as u64))?,
            entropy: positional_entropy(&tokens, s, loaded.model.vocab())?,
            nelbo_ppl: nelbo.ppl_bound(),
            wall_seconds: wall,
        });
    }
    Ok(rows)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (reference, s) = read_token_matrix(&a.reference)?;
    let mut inputs: Vec<&Path> = vec![&a.reference];
    let rows = if let Some(gen) = &a.generated {
        inputs.push(gen);
        let (tokens, gs) = read_token_matrix(gen)?;
        ensure!(gs == s, LddmError::ShapeMismatch(format!("generated rows have length {gs}, reference {s}")));
        let vocab = reference.iter().chain(&tokens).copied().max().unwrap_or(0) as usize + 2;
        vec![MetricReport {
            run_id: a.run_id.clone(),
            model: "file".into(),
            budget: 0,
            nfe: 0,
            swd: swd_row(&tokens, &reference, s, a.dirs, StreamKey::root(a.seed))?,
            entropy: positional_entropy(&tokens, s, vocab)?,
            nelbo_ppl: f64::NAN,
            wall_seconds: 0.0,
        }]
    } else {
        let ck = a.checkpoint.as_ref().expect("clap requires a checkpoint without generated samples");
        inputs.push(ck);
        let loaded = load_checkpoint(ck)?;
        evaluate_checkpoint(&loaded, &reference, &a.budgets, a.n, a.dirs, a.seed, &a.run_id, a.mc_draws, &a.sampling)?
    };
    append_csv(&a.out, &rows)?;
    write_manifest(&a.out, "eval", a.seed, None, &inputs)
}

pub fn oracle_text(a: &OracleArgs) -> Result<String> {
    let ms = MaskSchedule::new(a.steps, MaskScheduleKind::Linear)?;
    let targets = builtin_targets()?;
    match &a.target {
        None => {
            let rows = targets.iter().map(|t| oracle_row(t, &ms)).collect::<Result<Vec<_>>>()?;
            Ok(format_report(&rows))
        }
        Some(name) => {
            let t = targets
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| invalid!("unknown target `{name}`"))?;
            let r = oracle_row(t, &ms)?;
            let mut s = format!("target = {}\nsteps = {}\n", r.target, r.steps);
            let _ = writeln!(s, "bound_unconditional = {:.4}", r.bound_unconditional);
            if let Some(c) = r.bound_conditional {
                let _ = writeln!(s, "bound_conditional = {c:.4}");
            }
            let _ = writeln!(s, "entropy = {:.4}", r.entropy);
            Ok(s)
        }
    }
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let (reference, _) = read_token_matrix(&a.reference)?;
    let mut inputs: Vec<PathBuf> = vec![a.reference.clone()];
    let mut rows = Vec::new();
    for m in &a.models {
        let (fam, path) = m.split_once('=').ok_or_else(|| invalid!("model `{m}` is not FAMILY=PATH"))?;
        let family: ModelFamily = fam.parse()?;
        let path = PathBuf::from(path);
        let loaded = load_checkpoint(&path)?;
        ensure!(
            loaded.model.family() == family,
            invalid!("checkpoint {} holds a {} model, not {family}", path.display(), loaded.model.family())
        );
        rows.extend(evaluate_checkpoint(&loaded, &reference, &a.budgets, a.n, a.dirs, a.seed, &a.run_id, a.mc_draws, &a.sampling)?);
        inputs.push(path);
    }
    append_csv(&a.out, &rows)?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&a.out, "sweep", a.seed, None, &refs)
}
