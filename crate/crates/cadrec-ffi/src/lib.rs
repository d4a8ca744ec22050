//! C interface to the counting pipeline.
//!
//! Conventions: every entry point either returns a status code or a
//! pointer (NULL on failure); on failure a thread-local message is set,
//! readable via `cadrec_last_error` until the next call on that thread.
//! Handles are opaque and must be released with their matching `_free`
//! function. Strings returned as `char*` are owned by the caller and
//! must be released with `cadrec_string_free`. All functions are
//! panic-proof: a Rust panic is caught and reported as `CADREC_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cadrec::checkpoint;
use cadrec::cli;
use cadrec::config::Config;
use cadrec::evalinfer::Strategy;
use cadrec::model;
use cadrec::params::ParamStore;
use cadrec::scenegen::{self, Vocab};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CadrecStatus {
    /// Success.
    CadrecOk = 0,
    /// A required pointer argument was NULL.
    CadrecNullArgument = 1,
    /// A string argument was not valid UTF-8.
    CadrecInvalidUtf8 = 2,
    /// Invalid configuration, arguments, or file contents.
    CadrecInvalid = 3,
    /// The operating system reported an I/O failure.
    CadrecIo = 4,
    /// An internal invariant failed; see `cadrec_last_error`.
    CadrecPanic = 5,
}

/// Aggregate evaluation metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CadrecMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scene counts written by dataset generation.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CadrecGenCounts {
    pub n_train: usize,
    pub n_val: usize,
}

/// Opaque configuration handle.
pub struct CadrecConfig {
    inner: Config,
}

/// Opaque trained-model handle: configuration, vocabulary, and loaded
/// parameters, ready for per-pair counting.
pub struct CadrecModel {
    cfg: Config,
    vocab: Vocab,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

fn status_of(err: &cadrec::Error) -> CadrecStatus {
    match err {
        cadrec::Error::Io(_) => CadrecStatus::CadrecIo,
        _ => CadrecStatus::CadrecInvalid,
    }
}

fn report(err: cadrec::Error) -> CadrecStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

/// Runs a fallible body under panic protection, translating the
/// three-way outcome into a status code.
fn guarded(body: impl FnOnce() -> Result<(), CadrecStatus>) -> CadrecStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CadrecStatus::CadrecOk,
        Ok(Err(status)) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(msg);
            CadrecStatus::CadrecPanic
        }
    }
}

/// Like `guarded` but for constructors returning a pointer.
fn guarded_ptr<T>(body: impl FnOnce() -> Result<*mut T, CadrecStatus>) -> *mut T {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(p)) => p,
        Ok(Err(_)) => std::ptr::null_mut(),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(msg);
            std::ptr::null_mut()
        }
    }
}

/// Borrows a required C string argument as UTF-8.
unsafe fn require_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, CadrecStatus> {
    if ptr.is_null() {
        set_error(format!("{name} must not be NULL"));
        return Err(CadrecStatus::CadrecNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        CadrecStatus::CadrecInvalidUtf8
    })
}

/// Borrows an optional C string argument.
unsafe fn optional_str<'a>(ptr: *const c_char, name: &str) -> Result<Option<&'a str>, CadrecStatus> {
    if ptr.is_null() {
        return Ok(None);
    }
    require_str(ptr, name).map(Some)
}

unsafe fn require_ref<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, CadrecStatus> {
    if ptr.is_null() {
        set_error(format!("{name} must not be NULL"));
        return Err(CadrecStatus::CadrecNullArgument);
    }
    Ok(&*ptr)
}

fn parse_strategy(text: Option<&str>) -> Result<Option<Strategy>, CadrecStatus> {
    match text {
        None => Ok(None),
        Some(s) => s.parse::<Strategy>().map(Some).map_err(|e| report(e)),
    }
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn cadrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread, or an
/// empty string. Valid until the next cadrec call on the same thread.
#[no_mangle]
pub extern "C" fn cadrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn cadrec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A configuration with every field at its default.
#[no_mangle]
pub extern "C" fn cadrec_config_default() -> *mut CadrecConfig {
    guarded_ptr(|| {
        Ok(Box::into_raw(Box::new(CadrecConfig {
            inner: Config::default(),
        })))
    })
}

/// Parses configuration text (`key = value` under `[section]` headers).
/// Returns NULL and sets the error on any unknown or malformed line.
#[no_mangle]
pub unsafe extern "C" fn cadrec_config_parse(text: *const c_char) -> *mut CadrecConfig {
    guarded_ptr(|| {
        let text = require_str(text, "text")?;
        let inner = Config::parse(text).map_err(|e| report(e))?;
        Ok(Box::into_raw(Box::new(CadrecConfig { inner })))
    })
}

/// Reads and parses a configuration file.
#[no_mangle]
pub unsafe extern "C" fn cadrec_config_load(path: *const c_char) -> *mut CadrecConfig {
    guarded_ptr(|| {
        let path = require_str(path, "path")?;
        let inner = Config::load(Path::new(path)).map_err(|e| report(e))?;
        Ok(Box::into_raw(Box::new(CadrecConfig { inner })))
    })
}

/// Canonical serialisation of the configuration; parsing it back yields
/// an identical configuration. Free with `cadrec_string_free`.
#[no_mangle]
pub unsafe extern "C" fn cadrec_config_canonical(cfg: *const CadrecConfig) -> *mut c_char {
    guarded_ptr(|| {
        let cfg = require_ref(cfg, "cfg")?;
        let text = cfg.inner.canonical();
        CString::new(text)
            .map(CString::into_raw)
            .map_err(|_| CadrecStatus::CadrecInvalid)
    })
}

/// Overrides the run seed.
#[no_mangle]
pub unsafe extern "C" fn cadrec_config_set_seed(cfg: *mut CadrecConfig, seed: u64) -> CadrecStatus {
    guarded(|| {
        if cfg.is_null() {
            set_error("cfg must not be NULL");
            return Err(CadrecStatus::CadrecNullArgument);
        }
        (*cfg).inner.seed = seed;
        Ok(())
    })
}

/// Applies a cumulative stage preset (1 = bare decoder baseline through
/// 7 = every stage plus density-guided inference).
#[no_mangle]
pub unsafe extern "C" fn cadrec_config_set_ablation(
    cfg: *mut CadrecConfig,
    row: usize,
) -> CadrecStatus {
    guarded(|| {
        if cfg.is_null() {
            set_error("cfg must not be NULL");
            return Err(CadrecStatus::CadrecNullArgument);
        }
        let flags = model::AblationFlags::preset(row).map_err(|e| report(e))?;
        (*cfg).inner.model.flags = flags;
        Ok(())
    })
}

/// Number of trainable scalars this configuration instantiates.
#[no_mangle]
pub unsafe extern "C" fn cadrec_config_param_count(
    cfg: *const CadrecConfig,
    out: *mut usize,
) -> CadrecStatus {
    guarded(|| {
        let cfg = require_ref(cfg, "cfg")?;
        if out.is_null() {
            set_error("out must not be NULL");
            return Err(CadrecStatus::CadrecNullArgument);
        }
        *out = cli::param_count(&cfg.inner.model).map_err(|e| report(e))?;
        Ok(())
    })
}

/// Releases a configuration handle.
#[no_mangle]
pub unsafe extern "C" fn cadrec_config_free(cfg: *mut CadrecConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the train/validation scene datasets into `out_dir`
/// (`train.scenes`, `val.scenes`, plus a run manifest). Optionally
/// reports the split sizes.
#[no_mangle]
pub unsafe extern "C" fn cadrec_gen(
    cfg: *const CadrecConfig,
    out_dir: *const c_char,
    counts: *mut CadrecGenCounts,
) -> CadrecStatus {
    guarded(|| {
        let cfg = require_ref(cfg, "cfg")?;
        let out_dir = require_str(out_dir, "out_dir")?;
        let out = cli::cmd_gen(&cfg.inner, Path::new(out_dir)).map_err(|e| report(e))?;
        if !counts.is_null() {
            *counts = CadrecGenCounts {
                n_train: out.n_train,
                n_val: out.n_val,
            };
        }
        Ok(())
    })
}

/// Trains on a dataset file and writes the checkpoint, the metrics log
/// (`metrics` path, or the checkpoint path with a `.metrics` extension
/// when NULL), and a run manifest next to the checkpoint.
#[no_mangle]
pub unsafe extern "C" fn cadrec_train(
    cfg: *const CadrecConfig,
    data: *const c_char,
    out_ckpt: *const c_char,
    metrics: *const c_char,
) -> CadrecStatus {
    guarded(|| {
        let cfg = require_ref(cfg, "cfg")?;
        let data = require_str(data, "data")?;
        let out_ckpt = require_str(out_ckpt, "out_ckpt")?;
        let metrics = optional_str(metrics, "metrics")?;
        cli::cmd_train(
            &cfg.inner,
            Path::new(data),
            Path::new(out_ckpt),
            metrics.map(Path::new),
        )
        .map_err(|e| report(e))?;
        Ok(())
    })
}

/// Evaluates a checkpoint over every (scene, expression) pair in the
/// dataset and writes a report. `strategy` is "threshold", "density",
/// or NULL for the configuration's own switch. Optionally returns the
/// aggregate metrics.
#[no_mangle]
pub unsafe extern "C" fn cadrec_eval(
    cfg: *const CadrecConfig,
    ckpt: *const c_char,
    data: *const c_char,
    strategy: *const c_char,
    out_report: *const c_char,
    out: *mut CadrecMetrics,
) -> CadrecStatus {
    guarded(|| {
        let cfg = require_ref(cfg, "cfg")?;
        let ckpt = require_str(ckpt, "ckpt")?;
        let data = require_str(data, "data")?;
        let strategy = parse_strategy(optional_str(strategy, "strategy")?)?;
        let out_report = require_str(out_report, "out_report")?;
        let ev = cli::cmd_eval(
            &cfg.inner,
            Path::new(ckpt),
            Path::new(data),
            strategy,
            Path::new(out_report),
        )
        .map_err(|e| report(e))?;
        if !out.is_null() {
            *out = CadrecMetrics {
                mae: ev.result.mae,
                rmse: ev.result.rmse,
                precision: ev.result.precision,
                recall: ev.result.recall,
                f1: ev.result.f1,
            };
        }
        Ok(())
    })
}

/// Runs the full gradient-checking suite. `*out_ok` reports whether
/// every case passed; the per-case report text is returned through
/// `out_text` when non-NULL (free with `cadrec_string_free`).
#[no_mangle]
pub unsafe extern "C" fn cadrec_gradcheck(
    cfg: *const CadrecConfig,
    out_ok: *mut bool,
    out_text: *mut *mut c_char,
) -> CadrecStatus {
    guarded(|| {
        let cfg = require_ref(cfg, "cfg")?;
        if out_ok.is_null() {
            set_error("out_ok must not be NULL");
            return Err(CadrecStatus::CadrecNullArgument);
        }
        let mut sink = Vec::new();
        let ok = cli::cmd_gradcheck(&cfg.inner, &mut sink).map_err(|e| report(e))?;
        *out_ok = ok;
        if !out_text.is_null() {
            let text = String::from_utf8_lossy(&sink).replace('\0', " ");
            *out_text = CString::new(text)
                .map(CString::into_raw)
                .unwrap_or(std::ptr::null_mut());
        }
        Ok(())
    })
}

/// Exports the predicted and ground-truth density maps for one
/// (scene, expression) pair under `out_prefix` as binary tensors and
/// 8-bit graymaps.
#[no_mangle]
pub unsafe extern "C" fn cadrec_export_density(
    cfg: *const CadrecConfig,
    ckpt: *const c_char,
    data: *const c_char,
    scene_idx: usize,
    expr_idx: usize,
    out_prefix: *const c_char,
) -> CadrecStatus {
    guarded(|| {
        let cfg = require_ref(cfg, "cfg")?;
        let ckpt = require_str(ckpt, "ckpt")?;
        let data = require_str(data, "data")?;
        let out_prefix = require_str(out_prefix, "out_prefix")?;
        cli::cmd_export_density(
            &cfg.inner,
            Path::new(ckpt),
            Path::new(data),
            scene_idx,
            expr_idx,
            Path::new(out_prefix),
        )
        .map_err(|e| report(e))?;
        Ok(())
    })
}

/// Loads a trained checkpoint into a ready-to-count model handle. The
/// configuration must match the one the checkpoint was trained with.
#[no_mangle]
pub unsafe extern "C" fn cadrec_model_load(
    cfg: *const CadrecConfig,
    ckpt: *const c_char,
) -> *mut CadrecModel {
    guarded_ptr(|| {
        let cfg = require_ref(cfg, "cfg")?;
        let ckpt = require_str(ckpt, "ckpt")?;
        cfg.inner.validate().map_err(|e| report(e))?;
        let vocab = cli::build_vocab(&cfg.inner).map_err(|e| report(e))?;
        let mut store = cli::init_store(&cfg.inner).map_err(|e| report(e))?;
        checkpoint::load_params(Path::new(ckpt), &mut store).map_err(|e| report(e))?;
        Ok(Box::into_raw(Box::new(CadrecModel {
            cfg: cfg.inner.clone(),
            vocab,
            store,
        })))
    })
}

/// Counts the objects matching one expression of one scene in a dataset
/// file. `strategy` is "threshold", "density", or NULL for the model
/// configuration's switch.
#[no_mangle]
pub unsafe extern "C" fn cadrec_model_count(
    model: *const CadrecModel,
    data: *const c_char,
    scene_idx: usize,
    expr_idx: usize,
    strategy: *const c_char,
    out_count: *mut f64,
) -> CadrecStatus {
    guarded(|| {
        let m = require_ref(model, "model")?;
        let data = require_str(data, "data")?;
        if out_count.is_null() {
            set_error("out_count must not be NULL");
            return Err(CadrecStatus::CadrecNullArgument);
        }
        let strategy = parse_strategy(optional_str(strategy, "strategy")?)?;
        let records = scenegen::read_dataset(Path::new(data)).map_err(|e| report(e))?;
        let rec = records.get(scene_idx).ok_or_else(|| {
            set_error(format!("scene index {scene_idx} out of range"));
            CadrecStatus::CadrecInvalid
        })?;
        let mut opts = m.cfg.eval_options();
        if let Some(s) = strategy {
            opts.strategy = s;
        }
        let outcome = model::evaluate_pair(
            &m.store,
            &m.cfg.model,
            rec,
            scene_idx,
            expr_idx,
            &m.vocab,
            &m.cfg.gen,
            m.cfg.seed,
            &opts,
        )
        .map_err(|e| report(e))?;
        let count = match opts.strategy {
            Strategy::Threshold => outcome.count_threshold,
            Strategy::Density => outcome.count_density.ok_or_else(|| {
                set_error("this model has no density estimator");
                CadrecStatus::CadrecInvalid
            })?,
        };
        *out_count = count as f64;
        Ok(())
    })
}

/// Releases a model handle.
#[no_mangle]
pub unsafe extern "C" fn cadrec_model_free(model: *mut CadrecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
