//! C ABI for `rpo-core`.
//!
//! Every fallible function returns an [`RpoStatus`]; on failure a message is
//! available from [`rpo_last_error_message`] on the same thread. Models are
//! opaque [`RpoModel`] handles released with [`rpo_model_free`]. Strings
//! returned by the library are released with [`rpo_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rpo_core::embed::{embed_hashed_bow, EmbedError};
use rpo_core::losses::{
    dpo_grad_logratios, dpo_loss, ipo_grad_logratios, ipo_loss, kto_grad_at, kto_loss_at, kto_reference_point,
    rpo_grad_logratios, rpo_loss, score_matrix, weight_diagonal, weight_from_distances, weight_uniform, LogRatios,
    LossError, WeightMatrix,
};
use rpo_core::policy::{generate, logprob_response, DecodeConfig, ModelParams, ModelShape, PolicyError};
use rpo_core::synth::{bt_probability, SynthError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Utf8 = 6,
    Panic = 7,
}

/// A policy model. Created by [`rpo_model_new`] or [`rpo_model_load`].
pub struct RpoModel {
    params: ModelParams,
}

struct FfiError {
    status: RpoStatus,
    message: String,
}

impl FfiError {
    fn new(status: RpoStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<LossError> for FfiError {
    fn from(e: LossError) -> Self {
        let status = match e {
            LossError::NonFinite => RpoStatus::NonFinite,
            LossError::Shape { .. } | LossError::NotSquare(..) | LossError::NeedsPairs(..) | LossError::Empty => {
                RpoStatus::ShapeMismatch
            }
            _ => RpoStatus::InvalidArgument,
        };
        Self::new(status, e.to_string())
    }
}

impl From<PolicyError> for FfiError {
    fn from(e: PolicyError) -> Self {
        let status = match e {
            PolicyError::Io { .. } | PolicyError::Checkpoint(_) => RpoStatus::Io,
            PolicyError::NonFinite(_) => RpoStatus::NonFinite,
            PolicyError::ShapeMismatch { .. } => RpoStatus::ShapeMismatch,
            _ => RpoStatus::InvalidArgument,
        };
        Self::new(status, e.to_string())
    }
}

impl From<EmbedError> for FfiError {
    fn from(e: EmbedError) -> Self {
        Self::new(RpoStatus::InvalidArgument, e.to_string())
    }
}

impl From<SynthError> for FfiError {
    fn from(e: SynthError) -> Self {
        Self::new(RpoStatus::NonFinite, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), FfiError>) -> RpoStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => RpoStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {message}"));
            RpoStatus::Panic
        }
    }
}

fn null(name: &str) -> FfiError {
    FfiError::new(RpoStatus::NullPointer, format!("{name} is null"))
}

unsafe fn input<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], FfiError> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], FfiError> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Optional output: null means "not requested".
unsafe fn maybe_output<'a>(ptr: *mut f64, len: usize) -> Option<&'a mut [f64]> {
    (!ptr.is_null() && len > 0).then(|| std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn text<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, FfiError> {
    if ptr.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| FfiError::new(RpoStatus::Utf8, format!("{name} is not valid UTF-8")))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), FfiError> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

unsafe fn live<'a>(handle: *const RpoModel) -> Result<&'a RpoModel, FfiError> {
    handle.as_ref().ok_or_else(|| null("model"))
}

fn copy_weights(w: &WeightMatrix, out: &mut [f64]) {
    out.copy_from_slice(w.entries());
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next library call on the same thread.
#[no_mangle]
pub extern "C" fn rpo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rpo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a Gaussian-initialized model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_new(
    window: usize,
    embed_dim: usize,
    hidden: usize,
    seed: u64,
    init_scale: f64,
    out: *mut *mut RpoModel,
) -> RpoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = ModelShape::new(window, embed_dim, hidden)?;
        let params = ModelParams::init(shape, seed, init_scale)?;
        write(out, Box::into_raw(Box::new(RpoModel { params })), "out")
    })
}

/// Loads a checkpoint written by `rpo` or [`rpo_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_load(path: *const c_char, out: *mut *mut RpoModel) -> RpoStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let params = ModelParams::load(path)?;
        write(out, Box::into_raw(Box::new(RpoModel { params })), "out")
    })
}

/// Writes the model checkpoint to `path`.
///
/// # Safety
/// `model` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_save(model: *const RpoModel, path: *const c_char) -> RpoStatus {
    guard(|| {
        let m = live(model)?;
        Ok(m.params.save(text(path, "path")?)?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_free(model: *mut RpoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of parameters of the model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_num_params(model: *const RpoModel, out: *mut usize) -> RpoStatus {
    guard(|| {
        let m = live(model)?;
        write(out, m.params.values().len(), "out")
    })
}

/// Copies the flat parameter vector into `out` (`len` must equal the
/// parameter count).
///
/// # Safety
/// `model` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_params(model: *const RpoModel, out: *mut f64, len: usize) -> RpoStatus {
    guard(|| {
        let m = live(model)?;
        let values = m.params.values();
        if len != values.len() {
            return Err(FfiError::new(
                RpoStatus::ShapeMismatch,
                format!("buffer holds {len} values, model has {}", values.len()),
            ));
        }
        output(out, len, "out")?.copy_from_slice(values);
        Ok(())
    })
}

/// Log-probability of `response` (plus end-of-sequence) given `prompt`.
///
/// # Safety
/// `model` must be a live handle; strings must be NUL-terminated; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_logprob(
    model: *const RpoModel,
    prompt: *const c_char,
    response: *const c_char,
    out: *mut f64,
) -> RpoStatus {
    guard(|| {
        let m = live(model)?;
        let value = logprob_response(&m.params, text(prompt, "prompt")?, text(response, "response")?);
        write(out, value, "out")
    })
}

/// Generates up to `max_new` bytes. Temperature 0 decodes greedily. The
/// result must be released with [`rpo_string_free`].
///
/// # Safety
/// `model` must be a live handle; `prompt` must be NUL-terminated; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_model_decode(
    model: *const RpoModel,
    prompt: *const c_char,
    max_new: usize,
    temperature: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> RpoStatus {
    guard(|| {
        let m = live(model)?;
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(FfiError::new(
                RpoStatus::InvalidArgument,
                "temperature must be finite and >= 0",
            ));
        }
        let cfg = DecodeConfig {
            max_new,
            temperature,
            seed,
        };
        let decoded = generate(&m.params, text(prompt, "prompt")?, &cfg);
        let c = CString::new(decoded.replace('\0', "\u{fffd}")).expect("NUL bytes replaced");
        write(out, c.into_raw(), "out")
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rpo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Row-softmax of `-distances / tau` for a row-major `m x n` matrix.
///
/// # Safety
/// `distances` and `out` must each hold `m * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_weights_from_distances(
    distances: *const f64,
    m: usize,
    n: usize,
    tau: f64,
    out: *mut f64,
) -> RpoStatus {
    guard(|| {
        let len = m
            .checked_mul(n)
            .ok_or_else(|| FfiError::new(RpoStatus::ShapeMismatch, "m * n overflows"))?;
        let w = weight_from_distances(input(distances, len, "distances")?, m, n, tau)?;
        copy_weights(&w, output(out, len, "out")?);
        Ok(())
    })
}

/// Every entry `1 / n`.
///
/// # Safety
/// `out` must hold `m * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_weights_uniform(m: usize, n: usize, out: *mut f64) -> RpoStatus {
    guard(|| {
        let w = weight_uniform(m, n)?;
        copy_weights(&w, output(out, m * n, "out")?);
        Ok(())
    })
}

/// `alpha` on the diagonal of an `m x m` matrix, `(1 - alpha)/(m - 1)`
/// elsewhere.
///
/// # Safety
/// `out` must hold `m * m` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_weights_diagonal(m: usize, alpha: f64, out: *mut f64) -> RpoStatus {
    guard(|| {
        let w = weight_diagonal(m, m, alpha)?;
        copy_weights(&w, output(out, m * m, "out")?);
        Ok(())
    })
}

/// Contrast-matrix loss over `m` win and `n` lose log-ratios with row-major
/// `m x n` weights. Gradient outputs may be null.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn rpo_rpo_loss(
    wins: *const f64,
    m: usize,
    loses: *const f64,
    n: usize,
    weights: *const f64,
    beta: f64,
    out_loss: *mut f64,
    grad_wins: *mut f64,
    grad_loses: *mut f64,
) -> RpoStatus {
    guard(|| {
        let lr = LogRatios::new(input(wins, m, "wins")?.to_vec(), input(loses, n, "loses")?.to_vec())?;
        let w = WeightMatrix::new(m, n, input(weights, m * n, "weights")?.to_vec())?;
        let loss = rpo_loss(&score_matrix(&lr, &w, beta)?);
        let (gw, gl) = rpo_grad_logratios(&lr, &w, beta)?;
        write(out_loss, loss, "out_loss")?;
        if let Some(o) = maybe_output(grad_wins, m) {
            o.copy_from_slice(&gw);
        }
        if let Some(o) = maybe_output(grad_loses, n) {
            o.copy_from_slice(&gl);
        }
        Ok(())
    })
}

type PairedLoss = fn(&LogRatios, f64) -> Result<f64, LossError>;
type PairedGrad = fn(&LogRatios, f64) -> Result<(Vec<f64>, Vec<f64>), LossError>;

#[allow(clippy::too_many_arguments)]
unsafe fn paired(
    loss_fn: PairedLoss,
    grad_fn: PairedGrad,
    wins: *const f64,
    loses: *const f64,
    m: usize,
    beta: f64,
    out_loss: *mut f64,
    grad_wins: *mut f64,
    grad_loses: *mut f64,
) -> RpoStatus {
    guard(|| {
        let lr = LogRatios::new(input(wins, m, "wins")?.to_vec(), input(loses, m, "loses")?.to_vec())?;
        let loss = loss_fn(&lr, beta)?;
        let (gw, gl) = grad_fn(&lr, beta)?;
        write(out_loss, loss, "out_loss")?;
        if let Some(o) = maybe_output(grad_wins, m) {
            o.copy_from_slice(&gw);
        }
        if let Some(o) = maybe_output(grad_loses, m) {
            o.copy_from_slice(&gl);
        }
        Ok(())
    })
}

/// Pairwise logistic loss over `m` index-aligned pairs. Gradient outputs may
/// be null.
///
/// # Safety
/// `wins` and `loses` must hold `m` doubles; gradient buffers likewise.
#[no_mangle]
pub unsafe extern "C" fn rpo_dpo_loss(
    wins: *const f64,
    loses: *const f64,
    m: usize,
    beta: f64,
    out_loss: *mut f64,
    grad_wins: *mut f64,
    grad_loses: *mut f64,
) -> RpoStatus {
    paired(
        dpo_loss,
        dpo_grad_logratios,
        wins,
        loses,
        m,
        beta,
        out_loss,
        grad_wins,
        grad_loses,
    )
}

/// Squared-margin loss over `m` index-aligned pairs. Gradient outputs may be
/// null.
///
/// # Safety
/// `wins` and `loses` must hold `m` doubles; gradient buffers likewise.
#[no_mangle]
pub unsafe extern "C" fn rpo_ipo_loss(
    wins: *const f64,
    loses: *const f64,
    m: usize,
    beta: f64,
    out_loss: *mut f64,
    grad_wins: *mut f64,
    grad_loses: *mut f64,
) -> RpoStatus {
    paired(
        ipo_loss,
        ipo_grad_logratios,
        wins,
        loses,
        m,
        beta,
        out_loss,
        grad_wins,
        grad_loses,
    )
}

/// Prospect-style loss over `len` labeled log-ratios. The reference point is
/// the clamped batch mean. `out_reference` and `grad` may be null.
///
/// # Safety
/// `log_ratios`, `desirable` and `grad` must hold `len` elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rpo_kto_loss(
    log_ratios: *const f64,
    desirable: *const bool,
    len: usize,
    beta: f64,
    weight_desirable: f64,
    weight_undesirable: f64,
    out_loss: *mut f64,
    out_reference: *mut f64,
    grad: *mut f64,
) -> RpoStatus {
    guard(|| {
        let lr = input(log_ratios, len, "log_ratios")?;
        if len > 0 && desirable.is_null() {
            return Err(null("desirable"));
        }
        let labels: &[bool] = if len == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(desirable, len)
        };
        let weights = (weight_desirable, weight_undesirable);
        let z = kto_reference_point(lr)?;
        let loss = kto_loss_at(lr, labels, beta, weights, z)?;
        let g = kto_grad_at(lr, labels, beta, weights, z)?;
        write(out_loss, loss, "out_loss")?;
        if !out_reference.is_null() {
            out_reference.write(z);
        }
        if let Some(o) = maybe_output(grad, len) {
            o.copy_from_slice(&g);
        }
        Ok(())
    })
}

/// Probability that a response with reward `reward_w` beats one with reward
/// `reward_l`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_bt_probability(reward_w: f64, reward_l: f64, out: *mut f64) -> RpoStatus {
    guard(|| write(out, bt_probability(reward_w, reward_l)?, "out"))
}

/// Unit-norm hashed bag-of-words embedding of `text` into `out[dim]`.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_hashed_bow(text_ptr: *const c_char, dim: usize, out: *mut f64) -> RpoStatus {
    guard(|| {
        let e = embed_hashed_bow(text(text_ptr, "text")?, dim)?;
        output(out, dim, "out")?.copy_from_slice(e.values());
        Ok(())
    })
}
