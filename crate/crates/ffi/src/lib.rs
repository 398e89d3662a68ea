//! C ABI over the `lddm` library.
//!
//! Every fallible call returns an [`LddmStatus`]; on failure a message is
//! available from [`lddm_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Output buffers are
//! caller-owned and sized by the caller; too-small buffers yield
//! `LDDM_STATUS_BUFFER_TOO_SMALL` without partial writes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lddm::lddm::{make_time_grid, sample_model, LatentStep, ModelFamily, SamplePlan};
use lddm::metrics::sliced_wasserstein;
use ndarray::Array2;
use lddm::oracle::{factorization_bound, EnumerableTarget};
use lddm::rng::{label, StreamKey};
use lddm::sawtooth::{sample_sawtooth_batch, SawtoothConfig};
use lddm::schedules::{MaskSchedule, MaskScheduleKind};
use lddm::trainer::{load_checkpoint, LoadedModel, TrainConfig, Trainer};
use lddm::LddmError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LddmStatus {
    Ok = 0,
    InvalidArgument = 1,
    ShapeMismatch = 2,
    DegenerateSchedule = 3,
    DegenerateInput = 4,
    NumericalOverflow = 5,
    Capacity = 6,
    Parse = 7,
    Io = 8,
    Internal = 9,
    NullPointer = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&LddmError> for LddmStatus {
    fn from(e: &LddmError) -> Self {
        match e {
            LddmError::InvalidArgument(_) => LddmStatus::InvalidArgument,
            LddmError::ShapeMismatch(_) => LddmStatus::ShapeMismatch,
            LddmError::DegenerateSchedule(_) => LddmStatus::DegenerateSchedule,
            LddmError::DegenerateInput(_) => LddmStatus::DegenerateInput,
            LddmError::NumericalOverflow(_) => LddmStatus::NumericalOverflow,
            LddmError::Capacity(_) => LddmStatus::Capacity,
            LddmError::Parse(_) => LddmStatus::Parse,
            LddmError::Io(_) => LddmStatus::Io,
            LddmError::Internal(_) => LddmStatus::Internal,
        }
    }
}

/// Loss terms of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LddmLoss {
    pub data_term: f64,
    pub latent_term: f64,
    pub total: f64,
    pub lambda_latent: f64,
}

/// A trained model restored from a checkpoint (EMA weights).
pub struct LddmModel {
    inner: LoadedModel,
}

/// A training run in progress.
pub struct LddmTrainer {
    inner: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(LddmStatus, String);

impl From<LddmError> for Failure {
    fn from(e: LddmError) -> Self {
        Failure(LddmStatus::from(&e), e.to_string())
    }
}

fn fail(status: LddmStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Run `f`, translating errors and panics into a status.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> LddmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LddmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            LddmStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(LddmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LddmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(LddmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(fail(LddmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(fail(LddmStatus::NullPointer, format!("{what} is null")));
    }
    p.write(v);
    Ok(())
}

fn need(capacity: usize, required: usize) -> Result<(), Failure> {
    if capacity < required {
        return Err(fail(
            LddmStatus::BufferTooSmall,
            format!("buffer holds {capacity} elements, {required} required"),
        ));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lddm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lddm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint written by training.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lddm_model_load(path: *const c_char, out: *mut *mut LddmModel) -> LddmStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let inner = load_checkpoint(&path)?;
        write_out(out, Box::into_raw(Box::new(LddmModel { inner })), "out")
    })
}

/// # Safety
/// `model` must come from [`lddm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lddm_model_free(model: *mut LddmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sequence length, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lddm_model_seq_len(model: *const LddmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.model.seq_len())
}

/// Vocabulary size including the mask token, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lddm_model_vocab(model: *const LddmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.model.vocab())
}

/// 0 = MDLM, 1 = FUJI, 2 = SEQ; -1 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lddm_model_family(model: *const LddmModel) -> i32 {
    model.as_ref().map_or(-1, |m| match m.inner.model.family() {
        ModelFamily::Mdlm => 0,
        ModelFamily::Fuji => 1,
        ModelFamily::Seq => 2,
    })
}

/// Draw `n` sequences with `budget` data steps (`latent_steps` for the SEQ
/// latent chain) into `out_tokens`, row-major `n * seq_len`.
///
/// # Safety
/// `model` must be a live handle, `out_tokens` valid for `capacity` writes
/// and `out_nfe` null or valid.
#[no_mangle]
pub unsafe extern "C" fn lddm_model_sample(
    model: *const LddmModel,
    n: usize,
    budget: usize,
    latent_steps: usize,
    seed: u64,
    out_tokens: *mut u32,
    capacity: usize,
    out_nfe: *mut usize,
) -> LddmStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| fail(LddmStatus::NullPointer, "model is null"))?.inner;
        need(capacity, n * m.model.seq_len())?;
        let out = out_slice(out_tokens, capacity, "out_tokens")?;
        let plan = SamplePlan { budget, latent_steps, latent_step: LatentStep::Ancestral };
        let mut rng = StreamKey::root(seed).fork2(label::SAMPLE, budget as u64).rng();
        let samples = sample_model(&m.model, &m.ema, &m.schedules, plan, n, &mut rng)?;
        for (dst, src) in out.chunks_mut(m.model.seq_len()).zip(&samples.tokens) {
            dst.copy_from_slice(src.tokens());
        }
        if !out_nfe.is_null() {
            out_nfe.write(samples.nfe);
        }
        Ok(())
    })
}

/// Create a trainer from configuration text (`key = value` lines).
///
/// # Safety
/// `config` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lddm_trainer_new(config: *const c_char, out: *mut *mut LddmTrainer) -> LddmStatus {
    guard(|| {
        let cfg = TrainConfig::parse_text(c_str(config, "config")?)?;
        let inner = Trainer::new(cfg)?;
        write_out(out, Box::into_raw(Box::new(LddmTrainer { inner })), "out")
    })
}

/// # Safety
/// `trainer` must come from [`lddm_trainer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lddm_trainer_free(trainer: *mut LddmTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// One optimizer update.
///
/// # Safety
/// `trainer` must be a live handle; `out_loss` null or valid.
#[no_mangle]
pub unsafe extern "C" fn lddm_trainer_step(trainer: *mut LddmTrainer, out_loss: *mut LddmLoss) -> LddmStatus {
    guard(|| {
        let t = &mut trainer.as_mut().ok_or_else(|| fail(LddmStatus::NullPointer, "trainer is null"))?.inner;
        let rec = t.step()?;
        if !out_loss.is_null() {
            out_loss.write(LddmLoss {
                data_term: rec.loss.data_term,
                latent_term: rec.loss.latent_term,
                total: rec.loss.total,
                lambda_latent: rec.lambda_latent,
            });
        }
        Ok(())
    })
}

/// Updates performed so far, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lddm_trainer_steps_done(trainer: *const LddmTrainer) -> usize {
    trainer.as_ref().map_or(0, |t| t.inner.state().step)
}

/// Per-token validation NELBO of the EMA weights.
///
/// # Safety
/// `trainer` must be a live handle and `out_nelbo` valid.
#[no_mangle]
pub unsafe extern "C" fn lddm_trainer_evaluate(
    trainer: *const LddmTrainer,
    mc_draws: usize,
    out_nelbo: *mut f64,
) -> LddmStatus {
    guard(|| {
        let t = &trainer.as_ref().ok_or_else(|| fail(LddmStatus::NullPointer, "trainer is null"))?.inner;
        let v = t.evaluate(mc_draws)?;
        write_out(out_nelbo, v, "out_nelbo")
    })
}

/// Write a checkpoint loadable with [`lddm_model_load`].
///
/// # Safety
/// `trainer` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn lddm_trainer_save(trainer: *const LddmTrainer, path: *const c_char) -> LddmStatus {
    guard(|| {
        let t = &trainer.as_ref().ok_or_else(|| fail(LddmStatus::NullPointer, "trainer is null"))?.inner;
        let path = PathBuf::from(c_str(path, "path")?);
        t.checkpoint().write(&path)?;
        Ok(())
    })
}

/// `n` sawtooth sequences, row-major `n * seq_len` bits.
///
/// # Safety
/// `out_tokens` must be valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn lddm_sawtooth_sample(
    n: usize,
    seq_len: usize,
    periods: usize,
    floor: f64,
    seed: u64,
    out_tokens: *mut u32,
    capacity: usize,
) -> LddmStatus {
    guard(|| {
        need(capacity, n * seq_len)?;
        let out = out_slice(out_tokens, capacity, "out_tokens")?;
        let cfg = SawtoothConfig { seq_len, periods, floor };
        let batch = sample_sawtooth_batch(n, &cfg, &mut StreamKey::root(seed).fork(label::DATA).rng())?;
        out[..batch.tokens.len()].copy_from_slice(&batch.tokens);
        Ok(())
    })
}

/// Sliced Wasserstein distance between two `rows x cols` row-major samples.
///
/// # Safety
/// `a` and `b` must be valid for `rows * cols` reads and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lddm_sliced_wasserstein(
    a: *const f64,
    b: *const f64,
    rows: usize,
    cols: usize,
    dirs: usize,
    seed: u64,
    out: *mut f64,
) -> LddmStatus {
    guard(|| {
        let len = rows * cols;
        let to_matrix = |s: &[f64]| {
            Array2::from_shape_vec((rows, cols), s.to_vec()).map_err(|e| fail(LddmStatus::ShapeMismatch, e.to_string()))
        };
        let a = to_matrix(in_slice(a, len, "a")?)?;
        let b = to_matrix(in_slice(b, len, "b")?)?;
        let d = sliced_wasserstein(&a, &b, dirs, &mut StreamKey::root(seed).fork(label::SWD).rng())?;
        write_out(out, d, "out")
    })
}

/// Factorization bound (nats) of a target given as a probability table over
/// clean sequences, under the linear mask schedule with `steps` steps.
///
/// # Safety
/// `q0` must be valid for `len` reads and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn lddm_factorization_bound(
    q0: *const f64,
    len: usize,
    seq_len: usize,
    vocab: usize,
    steps: usize,
    out: *mut f64,
) -> LddmStatus {
    guard(|| {
        let q0 = in_slice(q0, len, "q0")?.to_vec();
        let target = EnumerableTarget::new("ffi", seq_len, vocab, q0)?;
        let ms = MaskSchedule::new(steps, MaskScheduleKind::Linear)?;
        write_out(out, factorization_bound(&target, &ms)?, "out")
    })
}

/// Sampling grid from `steps` down to 0 with `budget` intervals, written in
/// decreasing order; `out_len` receives `budget + 1` or fewer entries.
///
/// # Safety
/// `out` must be valid for `capacity` writes and `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn lddm_time_grid(
    steps: usize,
    budget: usize,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> LddmStatus {
    guard(|| {
        let grid = make_time_grid(steps, budget)?;
        let g = grid.steps();
        need(capacity, g.len())?;
        out_slice(out, capacity, "out")?[..g.len()].copy_from_slice(g);
        write_out(out_len, g.len(), "out_len")
    })
}
