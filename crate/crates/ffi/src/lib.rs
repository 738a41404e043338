//! C ABI over `adasparse`.
//!
//! Every function returns an [`AdasparseStatus`]; on anything but
//! `ADASPARSE_STATUS_OK` a message is kept per thread and can be copied out
//! with [`adasparse_last_error`]. Arrays are caller-owned, row-major `double`
//! buffers. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use adasparse::cli::RunConfig;
use adasparse::gradients::{entmax_alpha_grad, softmax_vjp, sparsemax_vjp, vjp, BackwardContext};
use adasparse::monotonic::{expected_alignment, hard_monotonic_decode, DecodeMode, SelectionProbabilities};
use adasparse::train::{gen_task, train_on, RunStatus, TrainingRun};
use adasparse::transforms::{LogitVector, Temperature, Transform, DEFAULT_BISECT_ITERS};
use adasparse::Error;
use ndarray::Array2;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdasparseStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidState = 2,
    InvalidConfig = 3,
    Io = 4,
    NullPointer = 5,
    /// Training produced a non-finite loss; the handle still holds the partial trace.
    Diverged = 6,
    Panic = 7,
}

/// Which normalizer to apply.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdasparseKind {
    Softmax = 0,
    Sparsemax = 1,
    Entmax15 = 2,
    /// Bisection α-entmax; uses the `alpha` argument.
    Entmax = 3,
}

/// Decision rule of [`adasparse_hard_decode`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdasparseDecode {
    Threshold = 0,
    Sample = 1,
}

/// Opaque result of [`adasparse_train`].
pub struct AdasparseRun {
    run: TrainingRun,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(AdasparseStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) => AdasparseStatus::InvalidArgument,
            Error::InvalidState(_) => AdasparseStatus::InvalidState,
            Error::Config(_) => AdasparseStatus::InvalidConfig,
            Error::Io(_) => AdasparseStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn bad(msg: impl Into<String>) -> Fail {
    Fail(AdasparseStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdasparseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AdasparseStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AdasparseStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail(AdasparseStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail(AdasparseStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn handle<'a>(run: *const AdasparseRun) -> Result<&'a AdasparseRun, Fail> {
    run.as_ref()
        .ok_or_else(|| Fail(AdasparseStatus::NullPointer, "run handle is null".into()))
}

fn kind_of(kind: i32) -> Result<AdasparseKind, Fail> {
    Ok(match kind {
        0 => AdasparseKind::Softmax,
        1 => AdasparseKind::Sparsemax,
        2 => AdasparseKind::Entmax15,
        3 => AdasparseKind::Entmax,
        _ => return Err(bad(format!("unknown transform kind {kind}"))),
    })
}

fn transform_of(kind: i32, alpha: f64, temp: f64) -> Result<Transform, Fail> {
    Ok(match kind_of(kind)? {
        AdasparseKind::Softmax => Transform::Softmax {
            temp: Temperature::new(temp)?,
        },
        AdasparseKind::Sparsemax => Transform::Sparsemax,
        AdasparseKind::Entmax15 => Transform::Entmax15,
        AdasparseKind::Entmax => {
            if !(alpha > 1.0 && alpha.is_finite()) {
                return Err(bad(format!("entmax needs a finite alpha > 1, got {alpha}")));
            }
            Transform::EntmaxBisect {
                alpha,
                iters: DEFAULT_BISECT_ITERS,
            }
        }
    })
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn adasparse_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adasparse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Maps `n` logits to a probability vector in `out`. `kind` is an
/// [`AdasparseKind`] value; `temp` is used by softmax only and `alpha` by
/// `Entmax` only.
///
/// # Safety
/// `logits` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn adasparse_transform(
    kind: i32,
    alpha: f64,
    temp: f64,
    logits: *const f64,
    n: usize,
    out: *mut f64,
) -> AdasparseStatus {
    guard(|| {
        let z = LogitVector::new(input(logits, n, "logits")?.to_vec())?;
        let p = transform_of(kind, alpha, temp)?.apply(&z)?;
        output(out, n, "out")?.copy_from_slice(p.probs());
        Ok(())
    })
}

/// Vector-Jacobian product `Jᵀ v` of the transform at `logits`.
///
/// # Safety
/// `logits`, `v` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn adasparse_transform_vjp(
    kind: i32,
    alpha: f64,
    temp: f64,
    logits: *const f64,
    v: *const f64,
    n: usize,
    out: *mut f64,
) -> AdasparseStatus {
    guard(|| {
        let z = LogitVector::new(input(logits, n, "logits")?.to_vec())?;
        let v = input(v, n, "v")?;
        let t = transform_of(kind, alpha, temp)?;
        let ctx = BackwardContext::forward(&t, &z)?;
        let g = match t {
            // softmax(z / t) picks up a 1/t factor
            Transform::Softmax { temp } => softmax_vjp(&ctx, v)?.into_iter().map(|x| x / temp.get()).collect(),
            Transform::Sparsemax => sparsemax_vjp(&ctx, v)?,
            _ => vjp(&ctx, v)?,
        };
        output(out, n, "out")?.copy_from_slice(&g);
        Ok(())
    })
}

/// ∂p/∂α of bisection α-entmax at `logits`, for 1 < α < 2.
///
/// # Safety
/// `logits` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn adasparse_alpha_grad(
    alpha: f64,
    logits: *const f64,
    n: usize,
    out: *mut f64,
) -> AdasparseStatus {
    guard(|| {
        let z = LogitVector::new(input(logits, n, "logits")?.to_vec())?;
        let t = transform_of(AdasparseKind::Entmax as i32, alpha, 1.0)?;
        let g = entmax_alpha_grad(&BackwardContext::forward(&t, &z)?)?;
        output(out, n, "out")?.copy_from_slice(&g);
        Ok(())
    })
}

unsafe fn selection(p: *const f64, steps: usize, frames: usize) -> Result<SelectionProbabilities, Fail> {
    if steps == 0 || frames == 0 {
        return Err(bad("steps and frames must be positive"));
    }
    let len = steps
        .checked_mul(frames)
        .ok_or_else(|| bad("steps * frames overflows"))?;
    let data = input(p, len, "p")?.to_vec();
    let arr = Array2::from_shape_vec((steps, frames), data).map_err(|e| bad(e.to_string()))?;
    Ok(SelectionProbabilities::new(arr)?)
}

/// Expected monotonic alignment of a `steps × frames` selection-probability
/// matrix. Writes the alignment to `a_out` (same shape) and, if non-null,
/// the per-step mass that never fired to `leftover_out` (`steps` doubles).
///
/// # Safety
/// `p` and `a_out` must point to `steps * frames` doubles; `leftover_out`
/// must be null or point to `steps` doubles.
#[no_mangle]
pub unsafe extern "C" fn adasparse_expected_alignment(
    p: *const f64,
    steps: usize,
    frames: usize,
    a_out: *mut f64,
    leftover_out: *mut f64,
) -> AdasparseStatus {
    guard(|| {
        let ea = expected_alignment(&selection(p, steps, frames)?);
        let out = output(a_out, steps * frames, "a_out")?;
        for (dst, src) in out.iter_mut().zip(ea.a.iter()) {
            *dst = *src;
        }
        if !leftover_out.is_null() {
            output(leftover_out, steps, "leftover_out")?.copy_from_slice(&ea.leftover);
        }
        Ok(())
    })
}

/// Hard monotonic decoding. `path_out[i]` receives the attended frame of
/// step `i`, or -1 once the scan ran past the last frame. `mode` is an
/// [`AdasparseDecode`] value; `seed` is used by `Sample` mode only.
///
/// # Safety
/// `p` must point to `steps * frames` doubles and `path_out` to `steps` integers.
#[no_mangle]
pub unsafe extern "C" fn adasparse_hard_decode(
    p: *const f64,
    steps: usize,
    frames: usize,
    mode: i32,
    seed: u64,
    path_out: *mut i64,
) -> AdasparseStatus {
    guard(|| {
        let mode = match mode {
            m if m == AdasparseDecode::Threshold as i32 => DecodeMode::Threshold,
            m if m == AdasparseDecode::Sample as i32 => DecodeMode::Sample { seed },
            _ => return Err(bad(format!("unknown decode mode {mode}"))),
        };
        let path = hard_monotonic_decode(&selection(p, steps, frames)?, mode);
        let out = output(path_out, steps, "path_out")?;
        for (dst, t) in out.iter_mut().zip(&path.t) {
            *dst = t.map_or(-1, |j| j as i64);
        }
        Ok(())
    })
}

/// Trains the toy model from a run-config JSON string (same format as the
/// `train` command; nothing is written to disk). On success or divergence
/// `*run_out` receives a handle to free with [`adasparse_run_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `run_out` writable.
#[no_mangle]
pub unsafe extern "C" fn adasparse_train(
    config_json: *const c_char,
    run_out: *mut *mut AdasparseRun,
) -> AdasparseStatus {
    let mut diverged = false;
    let status = guard(|| {
        if config_json.is_null() || run_out.is_null() {
            return Err(Fail(
                AdasparseStatus::NullPointer,
                "config_json or run_out is null".into(),
            ));
        }
        *run_out = ptr::null_mut();
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|e| Fail(AdasparseStatus::InvalidConfig, e.to_string()))?;
        let cfg = RunConfig::from_json(text)?;
        let (task, trainer) = cfg.resolved();
        let data = gen_task(&task)?;
        let run = train_on(&trainer, &task, &data)?;
        diverged = matches!(run.trace.status, RunStatus::Diverged { .. });
        *run_out = Box::into_raw(Box::new(AdasparseRun { run }));
        Ok(())
    });
    if status == AdasparseStatus::Ok && diverged {
        set_error("training diverged");
        return AdasparseStatus::Diverged;
    }
    status
}

/// Releases a run handle. Null is ignored.
///
/// # Safety
/// `run` must come from [`adasparse_train`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adasparse_run_free(run: *mut AdasparseRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Held-out greedy token accuracy and best-head alignment accuracy
/// (both 0 for a diverged run).
///
/// # Safety
/// `run` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn adasparse_run_accuracy(
    run: *const AdasparseRun,
    token_accuracy: *mut f64,
    alignment_accuracy: *mut f64,
) -> AdasparseStatus {
    guard(|| {
        let r = handle(run)?;
        output(token_accuracy, 1, "token_accuracy")?[0] = r.run.trace.token_accuracy();
        output(alignment_accuracy, 1, "alignment_accuracy")?[0] = r.run.trace.alignment_accuracy();
        Ok(())
    })
}

/// Number of logged trace rows.
///
/// # Safety
/// `run` must be a live handle and `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn adasparse_run_trace_len(run: *const AdasparseRun, len_out: *mut usize) -> AdasparseStatus {
    guard(|| {
        output(len_out, 1, "len_out")?[0] = handle(run)?.run.trace.rows.len();
        Ok(())
    })
}

/// Number of adaptive encoder heads, i.e. α values per trace row.
///
/// # Safety
/// `run` must be a live handle and `len_out` writable.
#[no_mangle]
pub unsafe extern "C" fn adasparse_run_alpha_heads(run: *const AdasparseRun, len_out: *mut usize) -> AdasparseStatus {
    guard(|| {
        output(len_out, 1, "len_out")?[0] = handle(run)?.run.trace.alpha_heads.len();
        Ok(())
    })
}

/// Row `index` of the trace: its step, loss and `n_alphas` α values.
///
/// # Safety
/// `run` must be a live handle; `step` and `loss` writable; `alphas` must
/// point to `n_alphas` doubles (null allowed when `n_alphas` is 0).
#[no_mangle]
pub unsafe extern "C" fn adasparse_run_trace_row(
    run: *const AdasparseRun,
    index: usize,
    step: *mut u64,
    loss: *mut f64,
    alphas: *mut f64,
    n_alphas: usize,
) -> AdasparseStatus {
    guard(|| {
        let r = handle(run)?;
        let row = r
            .run
            .trace
            .rows
            .get(index)
            .ok_or_else(|| bad(format!("trace row {index} out of range")))?;
        if n_alphas != row.alphas.len() {
            return Err(bad(format!(
                "row has {} alphas, buffer has {n_alphas}",
                row.alphas.len()
            )));
        }
        output(step, 1, "step")?[0] = row.step as u64;
        output(loss, 1, "loss")?[0] = row.loss;
        if n_alphas > 0 {
            output(alphas, n_alphas, "alphas")?.copy_from_slice(&row.alphas);
        }
        Ok(())
    })
}

/// Mean selection probability of each monotonic head on held-out samples.
///
/// # Safety
/// `run` must be a live handle and `out` point to `n` doubles, where `n`
/// is the number of monotonic heads.
#[no_mangle]
pub unsafe extern "C" fn adasparse_run_head_selection(
    run: *const AdasparseRun,
    out: *mut f64,
    n: usize,
) -> AdasparseStatus {
    guard(|| {
        let r = handle(run)?;
        let eval = r
            .run
            .trace
            .eval
            .as_ref()
            .ok_or_else(|| Fail(AdasparseStatus::InvalidState, "run has no evaluation".into()))?;
        if n != eval.head_mean_selection.len() {
            return Err(bad(format!("{} heads, buffer has {n}", eval.head_mean_selection.len())));
        }
        output(out, n, "out")?.copy_from_slice(&eval.head_mean_selection);
        Ok(())
    })
}
