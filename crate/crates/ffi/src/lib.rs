//! C interface to `prio-core`.
//!
//! Every function returns a [`PrioStatus`]. On failure the message for the
//! calling thread can be read with [`prio_last_error_message`]. Handles are
//! opaque and must be released with the matching `*_free` function. No
//! function retains caller pointers after it returns.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use prio_core::bank::{bank_from_json, PriorBank};
use prio_core::cap::whitened_distance;
use prio_core::conditioning::condition_size;
use prio_core::error::PrioError;
use prio_core::params::ModelParams;
use prio_core::routing::{route, Query, RoutingParams};
use prio_core::size_space::Epsilon;

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrioStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    ZeroGate = 6,
    Overflow = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded prior bank.
pub struct PrioBank {
    bank: PriorBank,
}

/// Routing projection weights.
pub struct PrioParams {
    routing: RoutingParams,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &PrioError) -> PrioStatus {
    match e {
        PrioError::Io { .. } => PrioStatus::Io,
        PrioError::Parse { .. } | PrioError::BankFormat(_) | PrioError::FeatureFormat(_) | PrioError::Config(_) => {
            PrioStatus::Format
        }
        PrioError::Dimension { .. } => PrioStatus::Dimension,
        PrioError::ZeroGate => PrioStatus::ZeroGate,
        PrioError::Overflow { .. } | PrioError::NonFiniteLoss(_) => PrioStatus::Overflow,
        _ => PrioStatus::InvalidArgument,
    }
}

struct Fail(PrioStatus, String);

impl From<PrioError> for Fail {
    fn from(e: PrioError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PrioStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PrioStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PrioStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PrioStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn triple(ptr: *const f64, what: &str) -> Result<[f64; 3], Fail> {
    let s = slice(ptr, 3, what)?;
    Ok([s[0], s[1], s[2]])
}

unsafe fn write_triple(ptr: *mut f64, v: [f64; 3]) {
    if !ptr.is_null() {
        std::ptr::copy_nonoverlapping(v.as_ptr(), ptr, 3);
    }
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, Fail> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Fail(PrioStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn read(path: &PathBuf) -> Result<String, Fail> {
    std::fs::read_to_string(path).map_err(|e| PrioError::io(path, e).into())
}

/// Copies the last error message of the calling thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the length the
/// full message needs, including the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn prio_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Loads a bank JSON file written by `prio build-bank`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prio_bank_load(path: *const c_char, out: *mut *mut PrioBank) -> PrioStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let bank = bank_from_json(&read(&path)?)?;
        *out = Box::into_raw(Box::new(PrioBank { bank }));
        Ok(())
    })
}

/// Releases a bank. Null is ignored.
///
/// # Safety
/// `bank` must come from `prio_bank_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn prio_bank_free(bank: *mut PrioBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Reports the bank's prototype count, class count and feature dimension.
/// Any output pointer may be null.
///
/// # Safety
/// `bank` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn prio_bank_shape(
    bank: *const PrioBank,
    prototypes: *mut usize,
    classes: *mut usize,
    feature_dim: *mut usize,
) -> PrioStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.bank;
        for (ptr, v) in [(prototypes, b.len()), (classes, b.num_classes()), (feature_dim, b.feature_dim())] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}

/// Loads routing weights from a parameter file written by `prio init-params`
/// or `prio toy train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prio_params_load(path: *const c_char, out: *mut *mut PrioParams) -> PrioStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = path_arg(path)?;
        let params = ModelParams::from_json(&read(&path)?)?;
        let routing = params
            .routing
            .ok_or_else(|| Fail(PrioStatus::Format, format!("{}: no routing block", path.display())))?;
        routing.validate()?;
        *out = Box::into_raw(Box::new(PrioParams { routing }));
        Ok(())
    })
}

/// Creates seeded routing weights of the given shape.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prio_params_init(
    query_dim: usize,
    feature_dim: usize,
    width: usize,
    seed: u64,
    out: *mut *mut PrioParams,
) -> PrioStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if query_dim == 0 || feature_dim == 0 || width == 0 {
            return Err(Fail(PrioStatus::InvalidArgument, "dimensions must be positive".into()));
        }
        let routing = RoutingParams::init(query_dim, feature_dim, width, seed);
        *out = Box::into_raw(Box::new(PrioParams { routing }));
        Ok(())
    })
}

/// Releases routing weights. Null is ignored.
///
/// # Safety
/// `params` must come from `prio_params_load` or `prio_params_init`.
#[no_mangle]
pub unsafe extern "C" fn prio_params_free(params: *mut PrioParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Routes one query through the bank.
///
/// `q` holds `q_len` query values, `p` holds one probability per bank class.
/// `weights` receives one weight per prototype and must hold `weights_len`
/// values, at least the prototype count. `mu_hat` and `sigma_hat` receive
/// three values each and may be null.
///
/// # Safety
/// All non-null pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn prio_route(
    bank: *const PrioBank,
    params: *const PrioParams,
    q: *const f64,
    q_len: usize,
    p: *const f64,
    p_len: usize,
    weights: *mut f64,
    weights_len: usize,
    mu_hat: *mut f64,
    sigma_hat: *mut f64,
) -> PrioStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.bank;
        let r = &params.as_ref().ok_or_else(|| null("params"))?.routing;
        let query = Query {
            q: slice(q, q_len, "q")?.to_vec(),
            p: slice(p, p_len, "p")?.to_vec(),
        };
        if !weights.is_null() && weights_len < b.len() {
            return Err(Fail(
                PrioStatus::BufferTooSmall,
                format!("weights holds {weights_len} values, bank has {} prototypes", b.len()),
            ));
        }
        let routed = route(&query, r, b)?;
        if !weights.is_null() {
            std::ptr::copy_nonoverlapping(routed.a.as_ptr(), weights, routed.a.len());
        }
        write_triple(mu_hat, routed.mu_hat);
        write_triple(sigma_hat, routed.sigma_hat);
        Ok(())
    })
}

/// Blends a log-space residual with a prior mean. All arrays hold three
/// values (height, width, length); `out` receives the metric size.
///
/// # Safety
/// Every pointer must reference three doubles.
#[no_mangle]
pub unsafe extern "C" fn prio_condition_size(
    residual: *const f64,
    mu_hat: *const f64,
    lambda: *const f64,
    eps: f64,
    out: *mut f64,
) -> PrioStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let eps = Epsilon::new(eps)?;
        let size = condition_size(triple(residual, "residual")?, triple(mu_hat, "mu_hat")?, triple(lambda, "lambda")?, eps)?;
        write_triple(out, size.as_array());
        Ok(())
    })
}

/// Squared whitened distance between a log-size point and one prototype.
///
/// # Safety
/// `x` must reference three doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn prio_whitened_distance(
    bank: *const PrioBank,
    prototype: usize,
    x: *const f64,
    out: *mut f64,
) -> PrioStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.bank;
        if out.is_null() {
            return Err(null("out"));
        }
        let proto = b.prototypes().get(prototype).ok_or_else(|| {
            Fail(
                PrioStatus::InvalidArgument,
                format!("prototype {prototype} out of range (bank has {})", b.len()),
            )
        })?;
        let x = triple(x, "x")?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Fail(PrioStatus::InvalidArgument, "x must be finite".into()));
        }
        *out = whitened_distance(x, proto);
        Ok(())
    })
}
