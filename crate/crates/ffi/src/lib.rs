//! C ABI over the tabmt library.
//!
//! Every fallible function returns a [`TabmtStatus`]. On failure the message
//! is available from [`tabmt_last_error`] on the same thread until the next
//! call. Models are opaque handles released with [`tabmt_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tabmt::checkpoint::Checkpoint;
use tabmt::flowcheck::{check_invariants, load_flows, CheckOptions, Vocabulary};
use tabmt::generation::{generate, impute, GenerationSpec, DEFAULT_BATCH_SIZE};
use tabmt::metrics::{dcr, FeatureSpace};
use tabmt::schema::load_csv;
use tabmt::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TabmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidArgument = 4,
    Checkpoint = 5,
    Data = 6,
    Panic = 7,
}

/// A loaded model with its codecs.
pub struct TabmtModel {
    inner: Checkpoint<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(TabmtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => TabmtStatus::Io,
            Error::InvalidArgument(_) | Error::Shape(_) => TabmtStatus::InvalidArgument,
            Error::Checkpoint(_) => TabmtStatus::Checkpoint,
            _ => TabmtStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TabmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TabmtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TabmtStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(TabmtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(TabmtStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(m: *const TabmtModel) -> Result<&'a TabmtModel, Failure> {
    m.as_ref()
        .ok_or_else(|| Failure(TabmtStatus::NullPointer, "model handle is null".into()))
}

unsafe fn temps_arg(temps: *const f64, n: usize, l: usize) -> Result<Vec<f64>, Failure> {
    if temps.is_null() {
        return if n == 0 {
            Ok(vec![1.0; l])
        } else {
            Err(Failure(TabmtStatus::NullPointer, "temps is null".into()))
        };
    }
    Ok(std::slice::from_raw_parts(temps, n).to_vec())
}

fn out_ptr<T>(p: *mut T) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(TabmtStatus::NullPointer, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tabmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn tabmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tabmt_model_load(path: *const c_char, out: *mut *mut TabmtModel) -> TabmtStatus {
    guard(|| {
        out_ptr(out)?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let inner = Checkpoint::<f32>::load(path)?;
        *out = Box::into_raw(Box::new(TabmtModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`tabmt_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tabmt_model_free(model: *mut TabmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of fields (columns) the model covers.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tabmt_model_num_fields(model: *const TabmtModel, out: *mut usize) -> TabmtStatus {
    guard(|| {
        out_ptr(out)?;
        *out = model_arg(model)?.inner.model.n_fields();
        Ok(())
    })
}

/// Writes `count` synthetic rows to a CSV at `out_path`. `temps` holds one
/// temperature per field, or is null with `n_temps == 0` for all ones.
///
/// # Safety
/// Pointers must be valid; `temps` must hold `n_temps` doubles.
#[no_mangle]
pub unsafe extern "C" fn tabmt_generate_csv(
    model: *const TabmtModel,
    count: usize,
    temps: *const f64,
    n_temps: usize,
    seed: u64,
    out_path: *const c_char,
) -> TabmtStatus {
    guard(|| {
        let m = &model_arg(model)?.inner;
        let out = path_arg(out_path, "out_path")?;
        let temps = temps_arg(temps, n_temps, m.model.n_fields())?;
        let spec = GenerationSpec::new(count, m.model.n_fields(), seed).with_temps(temps);
        let tokens = generate(&m.model, m.codec.schema(), &spec)?;
        m.codec.decode(&tokens)?.save_csv(out, "")?;
        Ok(())
    })
}

/// Fills the empty cells of the CSV at `in_path` and writes the result to
/// `out_path`. Sampling uses temperature one.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tabmt_impute_csv(
    model: *const TabmtModel,
    in_path: *const c_char,
    out_path: *const c_char,
    seed: u64,
) -> TabmtStatus {
    guard(|| {
        let m = &model_arg(model)?.inner;
        let input = path_arg(in_path, "in_path")?;
        let out = path_arg(out_path, "out_path")?;
        let raw = load_csv(input, m.codec.schema(), "")?;
        let tokens = m.codec.encode(&raw)?;
        let temps = vec![1.0; m.model.n_fields()];
        let filled = impute(&m.model, &tokens, &temps, seed, DEFAULT_BATCH_SIZE)?;
        m.codec.decode(&filled)?.save_csv(out, "")?;
        Ok(())
    })
}

/// Median distance from each synthetic row to its nearest training row.
///
/// # Safety
/// Pointers must be valid; `out` receives the result.
#[no_mangle]
pub unsafe extern "C" fn tabmt_dcr_csv(
    model: *const TabmtModel,
    train_path: *const c_char,
    synth_path: *const c_char,
    out: *mut f64,
) -> TabmtStatus {
    guard(|| {
        out_ptr(out)?;
        let m = &model_arg(model)?.inner;
        let train = load_csv(path_arg(train_path, "train_path")?, m.codec.schema(), "")?;
        let synth = load_csv(path_arg(synth_path, "synth_path")?, m.codec.schema(), "")?;
        let space = FeatureSpace::fit(&m.codec, &train, None)?;
        *out = dcr(&space.transform(&synth)?, &space.transform(&train)?)?;
        Ok(())
    })
}

/// Runs the netflow checks on `data_path` and stores a JSON report in
/// `*out_json`, to be released with [`tabmt_string_free`]. `train_path` may
/// be null, which disables the valid-values rule.
///
/// # Safety
/// Pointers must be valid; `out_json` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn tabmt_flowcheck_csv(
    data_path: *const c_char,
    train_path: *const c_char,
    out_json: *mut *mut c_char,
) -> TabmtStatus {
    guard(|| {
        out_ptr(out_json)?;
        *out_json = ptr::null_mut();
        let flows = load_flows(path_arg(data_path, "data_path")?)?;
        let vocab = if train_path.is_null() {
            None
        } else {
            Some(Vocabulary::from_records(&load_flows(path_arg(train_path, "train_path")?)?))
        };
        let report = check_invariants(&flows, vocab.as_ref(), &CheckOptions::default());
        let text = serde_json::to_string(&report).map_err(|e| Failure::from(Error::from(e)))?;
        *out_json = CString::new(text).unwrap_or_default().into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tabmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
