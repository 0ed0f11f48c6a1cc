//! C interface to the training laboratory.
//!
//! Conventions, in order of importance:
//!
//! - Every function returns a [`SeraStatus`]; out-values go through pointer
//!   parameters that are written only on `Ok`.
//! - Handles (`SeraWorld`, `SeraPolicy`, `SeraDataset`, `SeraRun`) are opaque;
//!   each has a `_free` function, and freeing `NULL` is a no-op. Handles are
//!   not reference-counted: freeing one while another thread uses it is the
//!   caller's bug, as in any C library.
//! - Safety contract, shared by every function that takes a pointer (all are
//!   `unsafe` on the Rust side): pointer arguments must either be NULL —
//!   which is checked and reported, never dereferenced — or point to a live
//!   value of the right type: a handle obtained from this library and not
//!   yet freed, a readable NUL-terminated string, or writable storage for
//!   the out-value (`cap` elements for buffers).
//! - On any non-`Ok` status the thread-local message returned by
//!   [`sera_last_error_message`] describes the failure; the pointer stays
//!   valid until the next failing call on the same thread.
//! - Panics never unwind across the boundary; they surface as
//!   `SeraStatus::Panic`.
//!
//! The header `include/sera.h` is regenerated from this file at build time
//! and committed, so C consumers need the file, not the generator.

// One safety contract covers every entry point; it lives in the crate docs
// above instead of being restated per function.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sera_core::eval::win_rate;
use sera_core::losses::LossKind;
use sera_core::policy::{fit_sft, SampleControls, TabularPolicy, TokenSeq};
use sera_core::seed::derive_rng;
use sera_core::synth::{
    gen_dataset, make_world, prompt_pool, sft_corpus, LabelPolicy, SyntheticWorld,
};
use sera_core::trainer::{run_sera, RunOutcome, SeraConfig};
use sera_core::{SeraError, SeraResult};

/// Status code returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeraStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument or configuration violated a precondition.
    InvalidArgument = 3,
    /// File or serialization failure.
    Io = 4,
    /// An index was outside the valid range.
    OutOfRange = 5,
    /// A caller-supplied buffer was too small; retry with the reported size.
    BufferTooSmall = 6,
    /// The operation itself failed (e.g. training hit a non-finite loss).
    Failed = 7,
    /// An internal panic was caught at the boundary.
    Panic = 8,
}

/// Loss family selector for [`SeraRunConfig`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeraLoss {
    Dpo = 0,
    Ipo = 1,
    Slic = 2,
    Simpo = 3,
}

/// Plain-data run configuration; fill with [`sera_run_config_defaults`] and
/// override fields as needed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SeraRunConfig {
    pub loss: SeraLoss,
    pub beta: f64,
    /// Number of training iterations T.
    pub t_iters: usize,
    /// Ensemble coefficient in [0, 1].
    pub gamma: f64,
    /// Offline pairs kept per iteration (top margins).
    pub k: usize,
    /// Self-generated pairs added per iteration.
    pub k_tilde: usize,
    /// Candidate completions per prompt when bootstrapping.
    pub r_candidates: usize,
    /// Bootstrap sampling temperature.
    pub temperature: f64,
    /// Bootstrap nucleus-sampling mass.
    pub top_p: f64,
    /// Bootstrap response-length cap.
    pub max_len: usize,
    pub epochs_per_iter: usize,
    pub lr: f64,
    /// Minibatch size; 0 trains full-batch.
    pub batch: usize,
    pub seed: u64,
}

/// Per-iteration training report (plain-data mirror).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SeraIterationReport {
    pub t: usize,
    pub dataset_size: usize,
    pub offline_kept: usize,
    pub bootstrapped_kept: usize,
    pub mean_loss_start: f64,
    pub mean_loss_end: f64,
    pub optimizer_steps: usize,
    pub loss_increased: bool,
    /// Index of this iteration's snapshot in the run history.
    pub snapshot_index: usize,
    /// Number of selected offline pair ids (see `sera_run_selected_ids`).
    pub selected_len: usize,
}

/// Opaque synthetic world handle.
pub struct SeraWorld(SyntheticWorld);
/// Opaque policy handle.
pub struct SeraPolicy(TabularPolicy);
/// Opaque preference-dataset handle.
pub struct SeraDataset {
    pairs: Vec<sera_core::PreferencePair>,
}
/// Opaque training-run handle.
pub struct SeraRun(RunOutcome);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("error message had NUL").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &SeraError) -> SeraStatus {
    match err {
        SeraError::InvalidToken { .. }
        | SeraError::VocabMismatch { .. }
        | SeraError::InvalidArgument(_)
        | SeraError::Config(_) => SeraStatus::InvalidArgument,
        SeraError::IterationOutOfRange { .. } | SeraError::SelectionTooLarge { .. } => {
            SeraStatus::OutOfRange
        }
        SeraError::Io(_)
        | SeraError::Json(_)
        | SeraError::DataFormat { .. }
        | SeraError::WouldOverwrite(_) => SeraStatus::Io,
        _ => SeraStatus::Failed,
    }
}

fn fail(status: SeraStatus, msg: String) -> SeraStatus {
    set_error(msg);
    status
}

fn fail_err(err: SeraError) -> SeraStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Runs `f` with panics converted to `SeraStatus::Panic`.
fn guarded(f: impl FnOnce() -> SeraStatus) -> SeraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(SeraStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

/// NULL-checks an input pointer and dereferences it.
macro_rules! require {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                return fail(
                    SeraStatus::NullPointer,
                    format!("{} must not be NULL", stringify!($ptr)),
                )
            }
        }
    };
}

/// NULL-checks an out-pointer for writing.
macro_rules! require_out {
    ($ptr:expr) => {
        match unsafe { $ptr.as_mut() } {
            Some(r) => r,
            None => {
                return fail(
                    SeraStatus::NullPointer,
                    format!("{} must not be NULL", stringify!($ptr)),
                )
            }
        }
    };
}

fn cstr_to_path<'a>(ptr: *const c_char) -> Result<&'a Path, SeraStatus> {
    if ptr.is_null() {
        set_error("path must not be NULL".to_string());
        return Err(SeraStatus::NullPointer);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8".to_string());
            Err(SeraStatus::InvalidUtf8)
        }
    }
}

fn boxed_out<T>(out: &mut *mut T, value: T) -> SeraStatus {
    *out = Box::into_raw(Box::new(value));
    SeraStatus::Ok
}

// ---------------------------------------------------------------------------
// Library metadata and error reporting
// ---------------------------------------------------------------------------

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sera_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread; empty string if none.
/// The pointer is invalidated by the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sera_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

/// Creates a synthetic preference world with `vocab` regular tokens and the
/// given gold-logit sharpness.
#[no_mangle]
pub unsafe extern "C" fn sera_world_create(
    vocab: u32,
    sharpness: f64,
    seed: u64,
    out: *mut *mut SeraWorld,
) -> SeraStatus {
    guarded(|| {
        let out = require_out!(out);
        match make_world(vocab, sharpness, seed) {
            Ok(w) => boxed_out(out, SeraWorld(w)),
            Err(e) => fail_err(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sera_world_free(world: *mut SeraWorld) {
    if !world.is_null() {
        drop(unsafe { Box::from_raw(world) });
    }
}

/// Number of regular tokens in the world's vocabulary.
#[no_mangle]
pub unsafe extern "C" fn sera_world_vocab_size(
    world: *const SeraWorld,
    out: *mut u32,
) -> SeraStatus {
    guarded(|| {
        let world = require!(world);
        let out = require_out!(out);
        *out = world.0.vocab().size();
        SeraStatus::Ok
    })
}

/// The world's default response-length cap.
#[no_mangle]
pub unsafe extern "C" fn sera_world_response_len_max(
    world: *const SeraWorld,
    out: *mut usize,
) -> SeraStatus {
    guarded(|| {
        let world = require!(world);
        let out = require_out!(out);
        *out = world.0.response_len_max();
        SeraStatus::Ok
    })
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// Uniform policy over the world's vocabulary.
#[no_mangle]
pub unsafe extern "C" fn sera_policy_uniform(
    world: *const SeraWorld,
    out: *mut *mut SeraPolicy,
) -> SeraStatus {
    guarded(|| {
        let world = require!(world);
        let out = require_out!(out);
        boxed_out(out, SeraPolicy(TabularPolicy::uniform(world.0.vocab())))
    })
}

#[no_mangle]
pub unsafe extern "C" fn sera_policy_clone(
    policy: *const SeraPolicy,
    out: *mut *mut SeraPolicy,
) -> SeraStatus {
    guarded(|| {
        let policy = require!(policy);
        let out = require_out!(out);
        boxed_out(out, SeraPolicy(policy.0.clone()))
    })
}

/// Loads a policy from the text format written by `sera_policy_save` (and by
/// the CLI).
#[no_mangle]
pub unsafe extern "C" fn sera_policy_load(
    path: *const c_char,
    out: *mut *mut SeraPolicy,
) -> SeraStatus {
    guarded(|| {
        let out = require_out!(out);
        let path = match cstr_to_path(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match TabularPolicy::load(path) {
            Ok(p) => boxed_out(out, SeraPolicy(p)),
            Err(e) => fail_err(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sera_policy_save(
    policy: *const SeraPolicy,
    path: *const c_char,
) -> SeraStatus {
    guarded(|| {
        let policy = require!(policy);
        let path = match cstr_to_path(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match policy.0.save(path) {
            Ok(()) => SeraStatus::Ok,
            Err(e) => fail_err(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sera_policy_free(policy: *mut SeraPolicy) {
    if !policy.is_null() {
        drop(unsafe { Box::from_raw(policy) });
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Samples a labeled preference dataset from the world.
///
/// `behavior` may be NULL for the uniform sampling policy. `max_len = 0`
/// uses the world's default cap. Labels follow the gold ordering, then are
/// corrupted at most once per pair: flipped with probability `flip_rate`,
/// otherwise longer-wins with probability `length_bias_rate`.
#[no_mangle]
pub unsafe extern "C" fn sera_dataset_generate(
    world: *const SeraWorld,
    behavior: *const SeraPolicy,
    n_pairs: usize,
    flip_rate: f64,
    length_bias_rate: f64,
    stochastic_labels: bool,
    temperature: f64,
    top_p: f64,
    max_len: usize,
    seed: u64,
    out: *mut *mut SeraDataset,
) -> SeraStatus {
    guarded(|| {
        let world = require!(world);
        let out = require_out!(out);
        let uniform;
        let behavior = match unsafe { behavior.as_ref() } {
            Some(b) => &b.0,
            None => {
                uniform = TabularPolicy::uniform(world.0.vocab());
                &uniform
            }
        };
        let label = LabelPolicy {
            flip_rate,
            length_bias_rate,
            stochastic_labels,
        };
        let controls = SampleControls {
            temperature,
            top_p,
            max_len: if max_len == 0 {
                world.0.response_len_max()
            } else {
                max_len
            },
            seed,
        };
        match gen_dataset(&world.0, behavior, n_pairs, &label, &controls) {
            Ok((pairs, _audits)) => boxed_out(out, SeraDataset { pairs }),
            Err(e) => fail_err(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn sera_dataset_len(
    dataset: *const SeraDataset,
    out: *mut usize,
) -> SeraStatus {
    guarded(|| {
        let dataset = require!(dataset);
        let out = require_out!(out);
        *out = dataset.pairs.len();
        SeraStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn sera_dataset_free(dataset: *mut SeraDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Fits the reference policy by maximum likelihood on the dataset's chosen
/// responses.
#[no_mangle]
pub unsafe extern "C" fn sera_policy_fit_sft(
    world: *const SeraWorld,
    dataset: *const SeraDataset,
    epochs: usize,
    lr: f64,
    out: *mut *mut SeraPolicy,
) -> SeraStatus {
    guarded(|| {
        let world = require!(world);
        let dataset = require!(dataset);
        let out = require_out!(out);
        match fit_sft(world.0.vocab(), &sft_corpus(&dataset.pairs), epochs, lr) {
            Ok(p) => boxed_out(out, SeraPolicy(p)),
            Err(e) => fail_err(e),
        }
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn loss_kind(loss: SeraLoss, beta: f64) -> LossKind {
    match loss {
        SeraLoss::Dpo => LossKind::Dpo { beta },
        SeraLoss::Ipo => LossKind::Ipo { beta },
        SeraLoss::Slic => LossKind::Slic { beta },
        SeraLoss::Simpo => LossKind::Simpo { beta },
    }
}

/// Fills `out` with the stock configuration for `n_pairs` offline
/// pairs under the given loss family.
#[no_mangle]
pub unsafe extern "C" fn sera_run_config_defaults(
    loss: SeraLoss,
    n_pairs: usize,
    seed: u64,
    out: *mut SeraRunConfig,
) -> SeraStatus {
    guarded(|| {
        let out = require_out!(out);
        let beta = match loss {
            SeraLoss::Dpo | SeraLoss::Slic => 0.2,
            SeraLoss::Ipo | SeraLoss::Simpo => 1.0,
        };
        let c = SeraConfig::defaults(loss_kind(loss, beta), n_pairs, seed);
        *out = SeraRunConfig {
            loss,
            beta,
            t_iters: c.t_iters,
            gamma: c.gamma,
            k: c.k,
            k_tilde: c.bootstrap.k_tilde,
            r_candidates: c.bootstrap.r_candidates,
            temperature: c.bootstrap.controls.temperature,
            top_p: c.bootstrap.controls.top_p,
            max_len: c.bootstrap.controls.max_len,
            epochs_per_iter: c.epochs_per_iter,
            lr: c.lr,
            batch: 0,
            seed: c.seed,
        };
        SeraStatus::Ok
    })
}

fn to_core_config(cfg: &SeraRunConfig, n_pairs: usize) -> SeraResult<SeraConfig> {
    let mut c = SeraConfig::defaults(loss_kind(cfg.loss, cfg.beta), n_pairs, cfg.seed);
    c.t_iters = cfg.t_iters;
    c.gamma = cfg.gamma;
    c.k = cfg.k;
    c.bootstrap.k_tilde = cfg.k_tilde;
    c.bootstrap.r_candidates = cfg.r_candidates;
    c.bootstrap.controls.temperature = cfg.temperature;
    c.bootstrap.controls.top_p = cfg.top_p;
    c.bootstrap.controls.max_len = cfg.max_len;
    c.epochs_per_iter = cfg.epochs_per_iter;
    c.lr = cfg.lr;
    c.batch = match cfg.batch {
        0 => sera_core::trainer::Batch::Full,
        b => sera_core::trainer::Batch::Size(b),
    };
    c.validate()?;
    Ok(c)
}

/// Runs the full training loop: margin selection over the offline dataset,
/// on-policy bootstrapping, and per-iteration retraining against the
/// previous snapshot.
#[no_mangle]
pub unsafe extern "C" fn sera_train(
    world: *const SeraWorld,
    sft: *const SeraPolicy,
    dataset: *const SeraDataset,
    config: *const SeraRunConfig,
    out: *mut *mut SeraRun,
) -> SeraStatus {
    guarded(|| {
        let _world = require!(world);
        let sft = require!(sft);
        let dataset = require!(dataset);
        let config = require!(config);
        let out = require_out!(out);
        let cfg = match to_core_config(config, dataset.pairs.len()) {
            Ok(c) => c,
            Err(e) => return fail_err(e),
        };
        let prompts = prompt_pool(&dataset.pairs);
        match run_sera(&sft.0, &dataset.pairs, &prompts, &cfg) {
            Ok(run) => boxed_out(out, SeraRun(run)),
            Err(e) => fail_err(e),
        }
    })
}

/// Number of snapshots in the run history (T iterations plus the start).
#[no_mangle]
pub unsafe extern "C" fn sera_run_snapshot_count(
    run: *const SeraRun,
    out: *mut usize,
) -> SeraStatus {
    guarded(|| {
        let run = require!(run);
        let out = require_out!(out);
        *out = run.0.history.snapshots().len();
        SeraStatus::Ok
    })
}

/// Clones snapshot `index` (0 is the starting policy) into a new handle.
#[no_mangle]
pub unsafe extern "C" fn sera_run_snapshot(
    run: *const SeraRun,
    index: usize,
    out: *mut *mut SeraPolicy,
) -> SeraStatus {
    guarded(|| {
        let run = require!(run);
        let out = require_out!(out);
        match run.0.history.snapshots().get(index) {
            Some(p) => boxed_out(out, SeraPolicy(p.clone())),
            None => fail(
                SeraStatus::OutOfRange,
                format!(
                    "snapshot {index} out of range for a history of {}",
                    run.0.history.snapshots().len()
                ),
            ),
        }
    })
}

fn report_for(run: &RunOutcome, t: usize) -> Option<&sera_core::trainer::IterationReport> {
    run.reports.iter().find(|r| r.t == t)
}

/// Copies the report for iteration `t` (1-based) into `out`.
#[no_mangle]
pub unsafe extern "C" fn sera_run_report(
    run: *const SeraRun,
    t: usize,
    out: *mut SeraIterationReport,
) -> SeraStatus {
    guarded(|| {
        let run = require!(run);
        let out = require_out!(out);
        match report_for(&run.0, t) {
            Some(r) => {
                *out = SeraIterationReport {
                    t: r.t,
                    dataset_size: r.dataset_size,
                    offline_kept: r.offline_kept,
                    bootstrapped_kept: r.bootstrapped_kept,
                    mean_loss_start: r.mean_loss_start,
                    mean_loss_end: r.mean_loss_end,
                    optimizer_steps: r.optimizer_steps,
                    loss_increased: r.loss_increased,
                    snapshot_index: r.snapshot_index,
                    selected_len: r.selected_ids.len(),
                };
                SeraStatus::Ok
            }
            None => fail(
                SeraStatus::OutOfRange,
                format!("no report for iteration {t}"),
            ),
        }
    })
}

/// Writes the offline pair ids trained on at iteration `t` (ascending) into
/// `buf`. Call with `cap = 0` to query the count via `written` alone;
/// returns `BufferTooSmall` (with `written` set to the required count) when
/// a non-zero `cap` is insufficient.
#[no_mangle]
pub unsafe extern "C" fn sera_run_selected_ids(
    run: *const SeraRun,
    t: usize,
    buf: *mut u64,
    cap: usize,
    written: *mut usize,
) -> SeraStatus {
    guarded(|| {
        let run = require!(run);
        let written = require_out!(written);
        let ids = match report_for(&run.0, t) {
            Some(r) => &r.selected_ids,
            None => {
                return fail(
                    SeraStatus::OutOfRange,
                    format!("no report for iteration {t}"),
                )
            }
        };
        *written = ids.len();
        if cap == 0 {
            return SeraStatus::Ok;
        }
        if buf.is_null() {
            return fail(
                SeraStatus::NullPointer,
                "buf must not be NULL when cap > 0".to_string(),
            );
        }
        if cap < ids.len() {
            return fail(
                SeraStatus::BufferTooSmall,
                format!("need space for {} ids, got {cap}", ids.len()),
            );
        }
        let slice = unsafe { std::slice::from_raw_parts_mut(buf, ids.len()) };
        for (dst, id) in slice.iter_mut().zip(ids) {
            *dst = *id;
        }
        SeraStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn sera_run_free(run: *mut SeraRun) {
    if !run.is_null() {
        drop(unsafe { Box::from_raw(run) });
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Gold win-rate of policy `a` over policy `b` on `n_prompts` fresh prompts
/// (ties count half). Responses are sampled from each policy under the given
/// controls; `max_len = 0` uses the world's default cap. Prompt derivation
/// matches the CLI's analyze command, so scores line up.
#[no_mangle]
pub unsafe extern "C" fn sera_win_rate(
    world: *const SeraWorld,
    a: *const SeraPolicy,
    b: *const SeraPolicy,
    n_prompts: usize,
    temperature: f64,
    top_p: f64,
    max_len: usize,
    seed: u64,
    out: *mut f64,
) -> SeraStatus {
    guarded(|| {
        let world = require!(world);
        let a = require!(a);
        let b = require!(b);
        let out = require_out!(out);
        let mut rng = derive_rng(seed, "evalprompts", &[]);
        let prompts: Vec<TokenSeq> = (0..n_prompts)
            .map(|_| world.0.sample_prompt(&mut rng))
            .collect();
        let controls = SampleControls {
            temperature,
            top_p,
            max_len: if max_len == 0 {
                world.0.response_len_max()
            } else {
                max_len
            },
            seed,
        };
        match win_rate(&world.0, &a.0, &b.0, &prompts, &controls) {
            Ok(r) => {
                *out = r.score;
                SeraStatus::Ok
            }
            Err(e) => fail_err(e),
        }
    })
}
