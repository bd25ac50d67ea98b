//! C ABI over the `wcmdp` solver.
//!
//! Objects are opaque handles created by `*_new`/`*_compute`/`*_solve`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`WcmdpStatus`]; on failure the message is available from
//! [`wcmdp_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use wcmdp::config::Config;
use wcmdp::error::Error;
use wcmdp::kernel::{compute_kernel, TransitionKernel};
use wcmdp::lp::{normalized_metrics, solve_params, LpSolution};
use wcmdp::model::{CostModel, SystemParams};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcmdpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidParams = 4,
    OutOfRange = 5,
    ShapeMismatch = 6,
    SolverFailed = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Validated system parameters and costs.
pub struct WcmdpModel {
    params: SystemParams,
    costs: CostModel,
}

/// Analytic transition kernel for one model.
pub struct WcmdpKernel {
    kernel: TransitionKernel,
}

/// KKT-certified relaxed LP solution.
pub struct WcmdpSolution {
    sol: LpSolution,
    params: SystemParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(err: &Error) -> WcmdpStatus {
    match err {
        Error::InvalidParams { .. } | Error::NonIntegerBudget { .. } => WcmdpStatus::InvalidParams,
        Error::Config(_) | Error::Json(_) | Error::Io(_) => WcmdpStatus::InvalidConfig,
        Error::StateOutOfRange { .. } | Error::Precondition(_) => WcmdpStatus::OutOfRange,
        Error::ShapeMismatch(_) => WcmdpStatus::ShapeMismatch,
        Error::IterationLimit { .. } | Error::Numerical(_) | Error::Diverged { .. } | Error::SizeLimit(_) => {
            WcmdpStatus::SolverFailed
        }
    }
}

/// Runs `f`, recording the message of any failure and containing panics.
fn guard(f: impl FnOnce() -> Result<(), (WcmdpStatus, String)>) -> WcmdpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WcmdpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WcmdpStatus::Panic
        }
    }
}

fn lift(err: Error) -> (WcmdpStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (WcmdpStatus, String) {
    (WcmdpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, (WcmdpStatus, String)> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), (WcmdpStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wcmdp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wcmdp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a JSON config (same keys as the CLI) into a model.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_model_new(json: *const c_char, out: *mut *mut WcmdpModel) -> WcmdpStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| (WcmdpStatus::InvalidUtf8, e.to_string()))?;
        let cfg = Config::from_json(text).map_err(lift)?;
        let params = cfg.params().map_err(lift)?;
        let costs = cfg.costs(&params).map_err(lift)?;
        write_out(out, Box::into_raw(Box::new(WcmdpModel { params, costs })), "out")
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`wcmdp_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_model_free(model: *mut WcmdpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Horizon `T` and number of per-queue states `K + 1`.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_model_dims(
    model: *const WcmdpModel,
    horizon: *mut usize,
    states: *mut usize,
) -> WcmdpStatus {
    guard(|| {
        let m = deref(model, "model")?;
        write_out(horizon, m.params.horizon, "horizon")?;
        write_out(states, m.params.num_states(), "states")
    })
}

/// Analytic kernel with geometric tail mass at most `tail_eps`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_kernel_compute(
    model: *const WcmdpModel,
    tail_eps: f64,
    out: *mut *mut WcmdpKernel,
) -> WcmdpStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let kernel = compute_kernel(&m.params, tail_eps).map_err(lift)?;
        write_out(out, Box::into_raw(Box::new(WcmdpKernel { kernel })), "out")
    })
}

/// `P(s' | s, a, b)`; zero for rows that admit into a full queue.
///
/// # Safety
/// `kernel` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_kernel_prob(
    kernel: *const WcmdpKernel,
    s: usize,
    s_prime: usize,
    a: usize,
    b: usize,
    out: *mut f64,
) -> WcmdpStatus {
    guard(|| {
        let k = &deref(kernel, "kernel")?.kernel;
        let n = k.states();
        if s >= n || s_prime >= n || a > 1 || b > 1 {
            return Err((
                WcmdpStatus::OutOfRange,
                format!("index (s={s}, s'={s_prime}, a={a}, b={b}) outside {n} states x 2 x 2"),
            ));
        }
        write_out(out, k.prob(s, s_prime, a, b), "out")
    })
}

/// Releases a kernel. Null is ignored.
///
/// # Safety
/// `kernel` must come from [`wcmdp_kernel_compute`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_kernel_free(kernel: *mut WcmdpKernel) {
    if !kernel.is_null() {
        drop(Box::from_raw(kernel));
    }
}

/// Solves the relaxed LP plus `gamma_reg * ||y||^2` to a KKT certificate.
///
/// # Safety
/// `model` and `kernel` must be live handles for the same model; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_solve_lp(
    model: *const WcmdpModel,
    kernel: *const WcmdpKernel,
    gamma_reg: f64,
    out: *mut *mut WcmdpSolution,
) -> WcmdpStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let k = &deref(kernel, "kernel")?.kernel;
        if k.states() != m.params.num_states() {
            return Err((WcmdpStatus::ShapeMismatch, "kernel was computed for a different buffer size".into()));
        }
        let sol = solve_params(&m.params, k, &m.costs, gamma_reg).map_err(lift)?;
        write_out(out, Box::into_raw(Box::new(WcmdpSolution { sol, params: m.params.clone() })), "out")
    })
}

/// Unregularized objective, normalized acceptance and high-rate
/// probabilities, and the largest KKT residual. Null outputs are skipped.
///
/// # Safety
/// `solution` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_solution_summary(
    solution: *const WcmdpSolution,
    objective: *mut f64,
    pi_a_hat: *mut f64,
    pi_h_hat: *mut f64,
    kkt_max: *mut f64,
) -> WcmdpStatus {
    guard(|| {
        let s = deref(solution, "solution")?;
        let (pa, ph) = normalized_metrics(&s.sol.y, &s.params);
        for (ptr, v) in [(objective, s.sol.objective), (pi_a_hat, pa), (pi_h_hat, ph), (kkt_max, s.sol.kkt.max())] {
            if !ptr.is_null() {
                ptr.write(v);
            }
        }
        Ok(())
    })
}

/// Copies `y` in `(t, s, a, b)` row-major order into `buf`, which must hold
/// `T * (K + 1) * 4` values. `len` is the capacity of `buf`.
///
/// # Safety
/// `solution` must be a live handle; `buf` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_solution_copy_y(
    solution: *const WcmdpSolution,
    buf: *mut f64,
    len: usize,
) -> WcmdpStatus {
    guard(|| {
        let y = deref(solution, "solution")?.sol.y.as_slice();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < y.len() {
            return Err((WcmdpStatus::BufferTooSmall, format!("need {} values, got {len}", y.len())));
        }
        std::ptr::copy_nonoverlapping(y.as_ptr(), buf, y.len());
        Ok(())
    })
}

/// Releases a solution. Null is ignored.
///
/// # Safety
/// `solution` must come from [`wcmdp_solve_lp`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wcmdp_solution_free(solution: *mut WcmdpSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_codes() {
        assert_eq!(status_of(&Error::Config("x".into())), WcmdpStatus::InvalidConfig);
        assert_eq!(status_of(&Error::StateOutOfRange { state: 3, max: 2 }), WcmdpStatus::OutOfRange);
        assert_eq!(status_of(&Error::Numerical("x".into())), WcmdpStatus::SolverFailed);
        assert_eq!(status_of(&Error::NonIntegerBudget { name: "alpha", value: 1.5 }), WcmdpStatus::InvalidParams);
    }

    #[test]
    fn guard_contains_panics_and_keeps_messages() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, WcmdpStatus::Panic);
        let msg = unsafe { CStr::from_ptr(wcmdp_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
        set_error("a\0b");
        let msg = unsafe { CStr::from_ptr(wcmdp_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }

    #[test]
    fn version_is_terminated() {
        let v = unsafe { CStr::from_ptr(wcmdp_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
