//! C interface to the fegl engine.
//!
//! An engine is opened from a run-config file and freed with
//! [`fegl_engine_free`]. Every call returns a [`FeglStatus`]; on failure
//! [`fegl_last_error`] describes the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fegl::cli::{self, RunConfig};
use fegl::drafter::Drafter;
use fegl::engine::{compute_tau, generate, Mode};
use fegl::target_model::{TargetModel, TokenId};
use fegl::Error;

/// Version of this interface; bumped on any incompatible change.
pub const FEGL_ABI_VERSION: u32 = 1;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeglStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Capacity = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Decoding strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeglMode {
    Vanilla = 0,
    CascadeTree = 1,
    CascadeChain = 2,
    ParallelHeads = 3,
}

/// Per-call generation settings. Start from [`fegl_default_options`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FeglGenerateOptions {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f32,
    pub depth: usize,
    pub topk: usize,
    pub mode: FeglMode,
    pub seed: u64,
    /// Token that ends generation; negative for none.
    pub eos: i64,
}

/// Counters of one generation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FeglRunStats {
    pub new_tokens: usize,
    pub cycles: usize,
    pub target_calls: usize,
    pub drafter_calls: usize,
    /// Mean tokens per cycle.
    pub tau: f64,
    pub wall_time_seconds: f64,
}

/// Opaque engine handle.
pub struct FeglEngine {
    config: RunConfig,
    target: TargetModel,
    cascade: Drafter,
    parallel: Drafter,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> FeglStatus {
    match e {
        Error::Config(_) => FeglStatus::Config,
        Error::Io(_) => FeglStatus::Io,
        Error::Format { .. } => FeglStatus::Format,
        Error::Capacity { .. } => FeglStatus::Capacity,
        Error::Parameter(_) | Error::Range(_) | Error::Dimension { .. } => FeglStatus::InvalidArgument,
        _ => FeglStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic for [`fegl_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (FeglStatus, String)>) -> FeglStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FeglStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FeglStatus::Internal
        }
    }
}

fn fail(e: Error) -> (FeglStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FeglStatus, String) {
    (FeglStatus::NullPointer, format!("{what} is null"))
}

fn mode_of(m: FeglMode) -> Mode {
    match m {
        FeglMode::Vanilla => Mode::Vanilla,
        FeglMode::CascadeTree => Mode::CascadeTree,
        FeglMode::CascadeChain => Mode::CascadeChain,
        FeglMode::ParallelHeads => Mode::ParallelHeads,
    }
}

fn ffi_mode(m: Mode) -> FeglMode {
    match m {
        Mode::Vanilla => FeglMode::Vanilla,
        Mode::CascadeTree => FeglMode::CascadeTree,
        Mode::CascadeChain => FeglMode::CascadeChain,
        Mode::ParallelHeads => FeglMode::ParallelHeads,
    }
}

#[no_mangle]
pub extern "C" fn fegl_abi_version() -> u32 {
    FEGL_ABI_VERSION
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fegl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opens an engine from a run-config file. Models come from the configured
/// weight paths; unset paths give seeded random models.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fegl_engine_open(config_path: *const c_char, out: *mut *mut FeglEngine) -> FeglStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if config_path.is_null() {
            return Err(null("config_path"));
        }
        let path = CStr::from_ptr(config_path)
            .to_str()
            .map_err(|_| (FeglStatus::InvalidArgument, "config path is not UTF-8".to_string()))?;
        let config = RunConfig::load(Path::new(path)).map_err(fail)?;
        let engine = FeglEngine {
            target: cli::load_target(&config).map_err(fail)?,
            cascade: cli::load_drafter(&config, false).map_err(fail)?,
            parallel: cli::load_drafter(&config, true).map_err(fail)?,
            config,
        };
        *out = Box::into_raw(Box::new(engine));
        Ok(())
    })
}

/// # Safety
/// `engine` must come from [`fegl_engine_open`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fegl_engine_free(engine: *mut FeglEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Vocabulary size of the engine's target model.
///
/// # Safety
/// `engine` must be a live handle or null (which returns 0).
#[no_mangle]
pub unsafe extern "C" fn fegl_vocab_size(engine: *const FeglEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.target.config().vocab_size)
}

/// Fills `out` with the generation settings of the engine's config.
///
/// # Safety
/// `engine` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fegl_default_options(engine: *const FeglEngine, out: *mut FeglGenerateOptions) -> FeglStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let g = engine.config.generation();
        *out = FeglGenerateOptions {
            max_new_tokens: g.max_new_tokens,
            temperature: g.temperature,
            depth: g.depth,
            topk: g.topk,
            mode: ffi_mode(g.mode),
            seed: g.seed,
            eos: g.eos.map_or(-1, i64::from),
        };
        Ok(())
    })
}

/// Generates a continuation of `prompt`. The tokens are written to
/// `out_tokens` and their count to `out_len`. When `out_capacity` is too
/// small nothing is written except `out_len`, and the call returns
/// `BufferTooSmall`. `options` and `stats` may be null.
///
/// # Safety
/// `engine` must be a live handle; `prompt` must point to `prompt_len`
/// tokens; `out_tokens` to `out_capacity` writable tokens (or be null when
/// `out_capacity` is 0); `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fegl_generate(
    engine: *const FeglEngine,
    prompt: *const u32,
    prompt_len: usize,
    options: *const FeglGenerateOptions,
    out_tokens: *mut u32,
    out_capacity: usize,
    out_len: *mut usize,
    stats: *mut FeglRunStats,
) -> FeglStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out_len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        *out_len = 0;
        if prompt.is_null() {
            return Err(null("prompt"));
        }
        let prompt: &[TokenId] = std::slice::from_raw_parts(prompt, prompt_len);
        let mut gen = engine.config.generation();
        if let Some(o) = options.as_ref() {
            gen.max_new_tokens = o.max_new_tokens;
            gen.temperature = o.temperature;
            gen.depth = o.depth;
            gen.topk = o.topk;
            gen.mode = mode_of(o.mode);
            gen.seed = o.seed;
            gen.eos = match o.eos {
                e if e < 0 => None,
                e => Some(TokenId::try_from(e).map_err(|_| {
                    (FeglStatus::InvalidArgument, format!("eos {e} is not a token id"))
                })?),
            };
        }
        let drafter = match gen.mode {
            Mode::Vanilla => None,
            Mode::ParallelHeads => Some(&engine.parallel),
            _ => Some(&engine.cascade),
        };
        let g = generate(prompt, &gen, &engine.target, drafter).map_err(fail)?;
        *out_len = g.tokens.len();
        if let Some(s) = stats.as_mut() {
            *s = FeglRunStats {
                new_tokens: g.tokens.len(),
                cycles: g.cycles.len(),
                target_calls: g.target_calls,
                drafter_calls: g.drafter_calls,
                tau: compute_tau(&g.cycles).unwrap_or(0.0),
                wall_time_seconds: g.wall_time,
            };
        }
        if g.tokens.len() > out_capacity {
            return Err((
                FeglStatus::BufferTooSmall,
                format!("{} tokens do not fit in a buffer of {out_capacity}", g.tokens.len()),
            ));
        }
        if !g.tokens.is_empty() {
            if out_tokens.is_null() {
                return Err(null("out_tokens"));
            }
            ptr::copy_nonoverlapping(g.tokens.as_ptr(), out_tokens, g.tokens.len());
        }
        Ok(())
    })
}
