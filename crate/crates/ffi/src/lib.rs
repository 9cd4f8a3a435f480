//! C ABI over the `confu` library.
//!
//! Conventions:
//! - every fallible function returns a [`ConfuStatus`]; on failure a message
//!   is stored per thread and read back with [`confu_last_error_message`];
//! - handles are opaque, created by `*_new`/`*_train`/`*_load` functions and
//!   released with the matching `*_free` (NULL is accepted);
//! - configs are passed as UTF-8 JSON strings in the same format the CLI
//!   reads; NULL means "all defaults";
//! - panics never cross the boundary, they become `CONFU_STATUS_INTERNAL`.
//!
//! Pointer rules for every `unsafe` function: each pointer is NULL (reported
//! as `CONFU_STATUS_NULL_POINTER` where a value is required) or valid for the
//! access implied by its type; strings are NUL-terminated; handles come from
//! this library and have not been freed. Handles may be shared across
//! threads for reading but not freed concurrently with use.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use confu::config::ExperimentConfig;
use confu::eval::{evaluate_model, RetrievalSpec};
use confu::nets::{init_model, load_checkpoint, save_checkpoint, ModelBundle};
use confu::synth::{generate, tc_exact, TripletDataset};
use confu::train::{train_with_eval, TrainReport};
use confu::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfuStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad config, bad argument, or an unsupported retrieval mode.
    InvalidArgument = 2,
    /// Training diverged or a computation hit a numerical domain error.
    Numerical = 3,
    Io = 4,
    /// A caller buffer is too small; the required length was written back.
    BufferTooSmall = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> ConfuStatus {
    match e.exit_code() {
        3 => ConfuStatus::Numerical,
        4 => ConfuStatus::Io,
        _ => ConfuStatus::InvalidArgument,
    }
}

struct Fail(ConfuStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: ConfuStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ConfuStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ConfuStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            ConfuStatus::Internal
        }
    }
}

fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: callers pass NULL or a pointer valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| fail(ConfuStatus::NullPointer, format!("`{name}` is NULL")))
}

fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    // SAFETY: non-NULL handles were produced by this library and not yet freed.
    unsafe { p.as_ref() }.ok_or_else(|| fail(ConfuStatus::NullPointer, format!("`{name}` is NULL")))
}

fn str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    // SAFETY: non-NULL strings must be NUL-terminated.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map(Some)
        .map_err(|_| {
            fail(
                ConfuStatus::InvalidArgument,
                format!("`{name}` is not valid UTF-8"),
            )
        })
}

fn parse_config(json: *const c_char) -> Result<ExperimentConfig, Fail> {
    let mut cfg = match str_arg(json, "config_json")? {
        Some(s) => ExperimentConfig::from_json(s)?,
        None => ExperimentConfig::default(),
    };
    cfg.resolve()?;
    Ok(cfg)
}

/// Train and test splits generated from one config.
pub struct ConfuDataset {
    config: ExperimentConfig,
    train: TripletDataset,
    test: TripletDataset,
}

/// A trained (or freshly initialized) model plus its training trace.
pub struct ConfuModel {
    bundle: ModelBundle,
    run_hash: String,
    report: Option<TrainReport>,
}

/// Values for the `split` arguments.
pub const CONFU_SPLIT_TRAIN: u32 = 0;
pub const CONFU_SPLIT_TEST: u32 = 1;

impl ConfuDataset {
    fn split(&self, s: u32) -> Result<&TripletDataset, Fail> {
        match s {
            CONFU_SPLIT_TRAIN => Ok(&self.train),
            CONFU_SPLIT_TEST => Ok(&self.test),
            _ => Err(fail(
                ConfuStatus::InvalidArgument,
                format!("unknown split {s}"),
            )),
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn confu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn confu_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Exact total correlation (nats) of one XOR coordinate.
///
/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_tc_exact(p_hat: f64, out: *mut f64) -> ConfuStatus {
    guard(|| {
        *out_ref(out, "out")? = tc_exact(p_hat)?;
        Ok(())
    })
}

/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_dataset_generate(
    config_json: *const c_char,
    out: *mut *mut ConfuDataset,
) -> ConfuStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let config = parse_config(config_json)?;
        let (train, test) = generate(&config.xor)?;
        *out = Box::into_raw(Box::new(ConfuDataset {
            config,
            train,
            test,
        }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn confu_dataset_free(ds: *mut ConfuDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_dataset_shape(
    ds: *const ConfuDataset,
    split: u32,
    rows: *mut usize,
    dim: *mut usize,
) -> ConfuStatus {
    guard(|| {
        let d = handle(ds, "ds")?.split(split)?;
        *out_ref(rows, "rows")? = d.len();
        *out_ref(dim, "dim")? = d.dim();
        Ok(())
    })
}

/// Copies modality `modality` (1, 2 or 3) row-major into `buf`. With a short
/// or NULL buffer, writes the required element count to `len` and returns
/// `CONFU_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_dataset_copy_block(
    ds: *const ConfuDataset,
    split: u32,
    modality: u32,
    buf: *mut f64,
    len: *mut usize,
) -> ConfuStatus {
    guard(|| {
        let d = handle(ds, "ds")?.split(split)?;
        let len = out_ref(len, "len")?;
        if !(1..=3).contains(&modality) {
            return Err(fail(
                ConfuStatus::InvalidArgument,
                format!("modality {modality} not in 1..=3"),
            ));
        }
        let data = d.block(modality as usize - 1).data();
        if buf.is_null() || *len < data.len() {
            *len = data.len();
            return Err(fail(
                ConfuStatus::BufferTooSmall,
                format!("buffer needs {} elements", data.len()),
            ));
        }
        // SAFETY: `buf` holds at least `*len >= data.len()` elements.
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len()) };
        *len = data.len();
        Ok(())
    })
}

/// Initializes and trains a model on the dataset's train split using the
/// `model` and `train` sections of `config_json`. Its `xor` section must
/// match the one the dataset was generated from.
///
/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_model_train(
    config_json: *const c_char,
    ds: *const ConfuDataset,
    out: *mut *mut ConfuModel,
) -> ConfuStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let ds = handle(ds, "ds")?;
        let cfg = parse_config(config_json)?;
        if cfg.data_hash() != ds.config.data_hash() {
            return Err(fail(
                ConfuStatus::InvalidArgument,
                "config `xor` section differs from the dataset's",
            ));
        }
        let mut bundle = init_model(&cfg.model_config(), cfg.seed)?;
        bundle.objective = cfg.train.objective;
        let (bundle, report) = train_with_eval(bundle, &ds.train, &cfg.train, None)?;
        *out = Box::into_raw(Box::new(ConfuModel {
            bundle,
            run_hash: cfg.run_hash(),
            report: Some(report),
        }));
        Ok(())
    })
}

/// Retrieval score of `model` on the dataset's test split. `spec_json` is one
/// retrieval spec, e.g. `{"target": 2, "queries": [1, 3]}`; NULL uses the
/// default X2-from-(X1, X3) accuracy over 500 pools of 32.
///
/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_model_evaluate(
    model: *const ConfuModel,
    ds: *const ConfuDataset,
    spec_json: *const c_char,
    out: *mut f64,
) -> ConfuStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let model = handle(model, "model")?;
        let ds = handle(ds, "ds")?;
        let spec = match str_arg(spec_json, "spec_json")? {
            Some(s) => serde_json::from_str(s).map_err(Error::from)?,
            None => RetrievalSpec::xor_default(),
        };
        spec.validate()?;
        let r = evaluate_model(&model.bundle, &ds.test, std::slice::from_ref(&spec))?;
        *out = r[0].value;
        Ok(())
    })
}

/// Final training loss, or NaN for a model that was loaded rather than trained.
///
/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_model_final_loss(
    model: *const ConfuModel,
    out: *mut f64,
) -> ConfuStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_ref(out, "out")? = m
            .report
            .as_ref()
            .and_then(|r| r.steps.last())
            .map_or(f64::NAN, |s| s.total);
        Ok(())
    })
}

/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_model_save(
    model: *const ConfuModel,
    path: *const c_char,
) -> ConfuStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = str_arg(path, "path")?
            .ok_or_else(|| fail(ConfuStatus::NullPointer, "`path` is NULL"))?;
        save_checkpoint(Path::new(path), &m.bundle, &m.run_hash)?;
        Ok(())
    })
}

/// # Safety
/// See the crate-level pointer rules.
#[no_mangle]
pub unsafe extern "C" fn confu_model_load(
    path: *const c_char,
    out: *mut *mut ConfuModel,
) -> ConfuStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = str_arg(path, "path")?
            .ok_or_else(|| fail(ConfuStatus::NullPointer, "`path` is NULL"))?;
        let (bundle, run_hash) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(ConfuModel {
            bundle,
            run_hash,
            report: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn confu_model_free(model: *mut ConfuModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
