//! C ABI over `rpy-core`.
//!
//! Objects cross the boundary as opaque heap handles created by `rpy_*_new`
//! / `rpy_*_from_*` functions and released by the matching `rpy_*_free`.
//! Every fallible call returns an [`RpyStatus`]; on failure the message is
//! available from [`rpy_last_error_message`] on the same thread.
//!
//! Matrices are passed row-major; policies are `m x n` with rows summing to 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rpy_core::divergence::{mmd2_unbiased, KernelSpec, SampleBatch};
use rpy_core::fair_lp::{solve_fair, FairLpSolution};
use rpy_core::mdp::{GroupPair, Policy};
use rpy_core::parity::{analyze, check_prop2, prop1_counterexample, return_disparity, Witness};
use rpy_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpyStatus {
    Ok = 0,
    NullPointer = 1,
    Parse = 2,
    Validation = 3,
    Dimension = 4,
    Assumption = 5,
    /// The LP did not reach an optimum (or a result needs one).
    NotOptimal = 6,
    Numerical = 7,
    InvalidArgument = 8,
    Panic = 9,
}

/// Group pair handle.
pub struct RpyGroupPair(GroupPair);

/// Policy handle.
pub struct RpyPolicy(Policy);

/// Fair-LP solution handle.
pub struct RpyFairSolution(FairLpSolution);

/// Exact disparity and both decomposition bounds (sup-norm witness).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RpyBounds {
    pub delta_ret: f64,
    pub return0: f64,
    pub return1: f64,
    pub thm1_reward_gap: f64,
    pub thm1_policy: f64,
    pub thm1_visitation: f64,
    pub thm1_total: f64,
    pub thm2_reward_gap: f64,
    pub thm2_occupancy: f64,
    pub thm2_total: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RpyStatus {
    match e {
        Error::Parse(_) => RpyStatus::Parse,
        Error::Validation(_) | Error::Config(_) | Error::Io(_) => RpyStatus::Validation,
        Error::DimensionMismatch(_) | Error::ShapeMismatch { .. } | Error::IndexOutOfRange { .. } => RpyStatus::Dimension,
        Error::AssumptionViolated { .. } | Error::WitnessPreconditionViolated(_) => RpyStatus::Assumption,
        Error::LpStatus(_) => RpyStatus::NotOptimal,
        Error::InvalidParameter(_) | Error::BatchTooSmall { .. } | Error::UnequalCounts(..) | Error::EmptyBatch => {
            RpyStatus::InvalidArgument
        }
        _ => RpyStatus::Numerical,
    }
}

/// Runs `f`, mapping errors and panics onto status codes.
fn guard(f: impl FnOnce() -> Result<(), (RpyStatus, String)>) -> RpyStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RpyStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RpyStatus::Panic
        }
    }
}

fn core<T>(r: rpy_core::Result<T>) -> Result<T, (RpyStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (RpyStatus, String) {
    (RpyStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (RpyStatus, String)> {
    // SAFETY: caller passes a pointer obtained from this library or null.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (RpyStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable doubles at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), (RpyStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null, caller-provided destination.
    unsafe { out.write(v) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next `rpy_*` call on the same thread.
#[no_mangle]
pub extern "C" fn rpy_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rpy_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a group-pair JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rpy_pair_from_json(json: *const c_char, out: *mut *mut RpyGroupPair) -> RpyStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let text = unsafe { CStr::from_ptr(json) }
            .to_str()
            .map_err(|e| (RpyStatus::Parse, format!("json is not UTF-8: {e}")))?;
        let pair = core(GroupPair::from_json(text))?;
        put(out, Box::into_raw(Box::new(RpyGroupPair(pair))), "out")
    })
}

/// The two-state absorbing pair whose disparity is `c` for every policy pair.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rpy_pair_prop1(c: f64, gamma: f64, out: *mut *mut RpyGroupPair) -> RpyStatus {
    guard(|| {
        let pair = core(prop1_counterexample(c, gamma))?;
        put(out, Box::into_raw(Box::new(RpyGroupPair(pair))), "out")
    })
}

/// # Safety
/// `pair` must be null or a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_pair_dims(pair: *const RpyGroupPair, num_states: *mut usize, num_actions: *mut usize) -> RpyStatus {
    guard(|| {
        let p = unsafe { deref(pair, "pair") }?;
        put(num_states, p.0.num_states(), "num_states")?;
        put(num_actions, p.0.num_actions(), "num_actions")
    })
}

/// # Safety
/// `pair` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn rpy_pair_free(pair: *mut RpyGroupPair) {
    if !pair.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(pair) });
    }
}

/// Builds a policy from `m * n` row-major probabilities.
///
/// # Safety
/// `probs` must point to `num_states * num_actions` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpy_policy_new(probs: *const f64, num_states: usize, num_actions: usize, out: *mut *mut RpyPolicy) -> RpyStatus {
    guard(|| {
        let len = num_states
            .checked_mul(num_actions)
            .ok_or_else(|| (RpyStatus::InvalidArgument, "policy size overflows".to_string()))?;
        let p = unsafe { slice(probs, len, "probs") }?;
        let pi = core(Policy::new(num_states, num_actions, p.to_vec()))?;
        put(out, Box::into_raw(Box::new(RpyPolicy(pi))), "out")
    })
}

/// # Safety
/// `policy` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn rpy_policy_free(policy: *mut RpyPolicy) {
    if !policy.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(policy) });
    }
}

/// `|eta_0^{pi0} - eta_1^{pi1}|`.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_return_disparity(
    pair: *const RpyGroupPair,
    pi0: *const RpyPolicy,
    pi1: *const RpyPolicy,
    out: *mut f64,
) -> RpyStatus {
    guard(|| {
        let (p, a, b) = unsafe { (deref(pair, "pair")?, deref(pi0, "pi0")?, deref(pi1, "pi1")?) };
        put(out, core(return_disparity(&p.0, &a.0, &b.0))?, "out")
    })
}

/// Exact disparity and both bounds with the sup-norm witness.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_analyze(
    pair: *const RpyGroupPair,
    pi0: *const RpyPolicy,
    pi1: *const RpyPolicy,
    out: *mut RpyBounds,
) -> RpyStatus {
    guard(|| {
        let (p, a, b) = unsafe { (deref(pair, "pair")?, deref(pi0, "pi0")?, deref(pi1, "pi1")?) };
        let r = core(analyze(&p.0, &a.0, &b.0, &Witness::SupNormBall))?;
        put(
            out,
            RpyBounds {
                delta_ret: r.delta_ret,
                return0: r.return0,
                return1: r.return1,
                thm1_reward_gap: r.bound_thm1.reward_gap_term,
                thm1_policy: r.bound_thm1.policy_term,
                thm1_visitation: r.bound_thm1.visitation_ipm_term,
                thm1_total: r.bound_thm1.total,
                thm2_reward_gap: r.bound_thm2.reward_gap_term,
                thm2_occupancy: r.bound_thm2.occupancy_ipm_term,
                thm2_total: r.bound_thm2.total,
            },
            "out",
        )
    })
}

/// Checks the sufficient condition for exact return parity when only the
/// transitions differ. Fails with `RPY_STATUS_ASSUMPTION` when the pair does
/// not share a state-only reward and initial distribution.
///
/// # Safety
/// `pair` must be live; out pointers writable (`margin` may be null).
#[no_mangle]
pub unsafe extern "C" fn rpy_check_prop2(pair: *const RpyGroupPair, holds: *mut bool, margin: *mut f64) -> RpyStatus {
    guard(|| {
        let p = unsafe { deref(pair, "pair") }?;
        let o = core(check_prop2(&p.0))?;
        put(holds, o.holds, "holds")?;
        if !margin.is_null() {
            put(margin, o.margin, "margin")?;
        }
        Ok(())
    })
}

/// Solves the return-parity-constrained LP. A solution handle is returned
/// even when the LP is not optimal; query it with `rpy_fair_is_optimal`.
///
/// # Safety
/// `pair` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_solve_fair(pair: *const RpyGroupPair, epsilon: f64, out: *mut *mut RpyFairSolution) -> RpyStatus {
    guard(|| {
        let p = unsafe { deref(pair, "pair") }?;
        let sol = core(solve_fair(&p.0, epsilon))?;
        put(out, Box::into_raw(Box::new(RpyFairSolution(sol))), "out")
    })
}

/// # Safety
/// `sol` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_fair_is_optimal(sol: *const RpyFairSolution, out: *mut bool) -> RpyStatus {
    guard(|| {
        let s = unsafe { deref(sol, "sol") }?;
        put(out, s.0.is_optimal(), "out")
    })
}

fn need_optimal<T: Copy>(v: Option<T>, what: &str) -> Result<T, (RpyStatus, String)> {
    v.ok_or_else(|| (RpyStatus::NotOptimal, format!("{what} is unavailable: the LP is not optimal")))
}

/// # Safety
/// `sol` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_fair_objective(sol: *const RpyFairSolution, out: *mut f64) -> RpyStatus {
    guard(|| {
        let s = unsafe { deref(sol, "sol") }?;
        put(out, need_optimal(s.0.objective, "objective")?, "out")
    })
}

/// Exact disparity of the recovered policies.
///
/// # Safety
/// `sol` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_fair_achieved_disparity(sol: *const RpyFairSolution, out: *mut f64) -> RpyStatus {
    guard(|| {
        let s = unsafe { deref(sol, "sol") }?;
        put(out, need_optimal(s.0.achieved_disparity, "achieved disparity")?, "out")
    })
}

/// Parity prices `b0`, `b1` at the optimum.
///
/// # Safety
/// `sol` must be live; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_fair_prices(sol: *const RpyFairSolution, b0: *mut f64, b1: *mut f64) -> RpyStatus {
    guard(|| {
        let s = unsafe { deref(sol, "sol") }?;
        put(b0, need_optimal(s.0.b0, "b0")?, "b0")?;
        put(b1, need_optimal(s.0.b1, "b1")?, "b1")
    })
}

/// Copies group `group`'s recovered policy (row-major, `len` must equal
/// `m * n`) into `buf`.
///
/// # Safety
/// `sol` must be live; `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpy_fair_policy(sol: *const RpyFairSolution, group: usize, buf: *mut f64, len: usize) -> RpyStatus {
    guard(|| {
        let s = unsafe { deref(sol, "sol") }?;
        let pi = match group {
            0 => s.0.pi0.as_ref(),
            1 => s.0.pi1.as_ref(),
            g => return Err((RpyStatus::InvalidArgument, format!("group {g} is not 0 or 1"))),
        };
        let pi = pi.ok_or_else(|| (RpyStatus::NotOptimal, "no policy: the LP is not optimal".to_string()))?;
        let flat: Vec<f64> = pi.to_rows().concat();
        if len != flat.len() {
            return Err((RpyStatus::Dimension, format!("buffer holds {len} values, policy has {}", flat.len())));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        // SAFETY: non-null with room for `len` doubles per the contract.
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(&flat);
        Ok(())
    })
}

/// # Safety
/// `sol` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn rpy_fair_free(sol: *mut RpyFairSolution) {
    if !sol.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(sol) });
    }
}

/// Unbiased squared MMD between `n0` and `n1` row-major points of dimension
/// `dim`, with an equal-weight mixture of RBF kernels
/// `exp(-|x - y|^2 / (2 b))`. Passing zero bandwidths selects the default
/// multiscale set.
///
/// # Safety
/// Arrays must hold the stated number of doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpy_mmd2_unbiased(
    x0: *const f64,
    n0: usize,
    x1: *const f64,
    n1: usize,
    dim: usize,
    bandwidths: *const f64,
    num_bandwidths: usize,
    out: *mut f64,
) -> RpyStatus {
    guard(|| {
        let overflow = || (RpyStatus::InvalidArgument, "sample size overflows".to_string());
        let a = unsafe { slice(x0, n0.checked_mul(dim).ok_or_else(overflow)?, "x0") }?;
        let b = unsafe { slice(x1, n1.checked_mul(dim).ok_or_else(overflow)?, "x1") }?;
        let bw = unsafe { slice(bandwidths, num_bandwidths, "bandwidths") }?;
        let k = if bw.is_empty() {
            KernelSpec::multiscale()
        } else {
            core(KernelSpec::new(bw.to_vec()))?
        };
        let h0 = core(SampleBatch::new(dim, a.to_vec()))?;
        let h1 = core(SampleBatch::new(dim, b.to_vec()))?;
        put(out, core(mmd2_unbiased(&h0, &h1, &k))?, "out")
    })
}
