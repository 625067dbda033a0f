//! C ABI over the rpo-lab metrics, policies and identity suite.
//!
//! Every fallible function returns an [`RpoStatus`]; on failure a message is
//! available from [`rpo_last_error`] on the calling thread. Output arguments
//! are written only on success. Policies are opaque handles owned by the
//! caller and released with [`rpo_policy_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rpo_lab::identity::{run_identity_checks, IdentityOptions};
use rpo_lab::metrics::{
    distance_multi, distance_multi_grad, distance_pair, distance_pair_grad, softmax, MarginPair,
    MetricKind, RewardVector,
};
use rpo_lab::objectives::online_score_scales;
use rpo_lab::policy::{FactorizedPolicy, Response, Vocab};
use rpo_lab::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MetricKind = 3,
    NonFinite = 4,
    ShapeMismatch = 5,
    IdentityFailure = 6,
    Internal = 7,
}

/// Distance metric selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpoMetric {
    Sq = 0,
    BwdBernoulli = 1,
    SqNaive = 2,
    Sqloo = 3,
    BwdCategorical = 4,
    FwdCategorical = 5,
}

impl From<RpoMetric> for MetricKind {
    fn from(m: RpoMetric) -> Self {
        match m {
            RpoMetric::Sq => MetricKind::Sq,
            RpoMetric::BwdBernoulli => MetricKind::BwdBernoulli,
            RpoMetric::SqNaive => MetricKind::SqNaive,
            RpoMetric::Sqloo => MetricKind::Sqloo,
            RpoMetric::BwdCategorical => MetricKind::BwdCategorical,
            RpoMetric::FwdCategorical => MetricKind::FwdCategorical,
        }
    }
}

/// Opaque position-factorized policy.
pub struct RpoPolicy {
    inner: FactorizedPolicy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> RpoStatus {
    match err {
        Error::MetricKind { .. } => RpoStatus::MetricKind,
        Error::NonFinite(_) => RpoStatus::NonFinite,
        Error::ShapeMismatch(_) | Error::LengthMismatch { .. } => RpoStatus::ShapeMismatch,
        _ => RpoStatus::InvalidArgument,
    }
}

/// Fails with this status and message.
struct Fail(RpoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> RpoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RpoStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RpoStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(RpoStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to `n` readable doubles.
unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable doubles.
unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// # Safety
/// `p` must be null or valid for writes.
unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

/// # Safety
/// `p` must be null or a live handle from this library.
unsafe fn policy<'a>(p: *const RpoPolicy, what: &str) -> Result<&'a FactorizedPolicy, Fail> {
    p.as_ref().map(|h| &h.inner).ok_or_else(|| null(what))
}

fn pair(b: f64, a: f64) -> MarginPair {
    if b == f64::INFINITY {
        MarginPair::dpo_limit(a)
    } else {
        MarginPair::new(a, b)
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rpo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a metric name such as `"sqloo"` or `"bwd-categorical"`.
///
/// # Safety
/// `name` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_metric_from_name(name: *const c_char, out: *mut RpoMetric) -> RpoStatus {
    guard(|| {
        if name.is_null() {
            return Err(null("name"));
        }
        let s = CStr::from_ptr(name)
            .to_str()
            .map_err(|e| Fail(RpoStatus::InvalidArgument, e.to_string()))?;
        let m = match s.parse::<MetricKind>()? {
            MetricKind::Sq => RpoMetric::Sq,
            MetricKind::BwdBernoulli => RpoMetric::BwdBernoulli,
            MetricKind::SqNaive => RpoMetric::SqNaive,
            MetricKind::Sqloo => RpoMetric::Sqloo,
            MetricKind::BwdCategorical => RpoMetric::BwdCategorical,
            MetricKind::FwdCategorical => RpoMetric::FwdCategorical,
        };
        write(out, m, "out")
    })
}

/// Pair distance `D[a ‖ b]`; `b = +inf` selects the DPO limit.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_distance_pair(metric: RpoMetric, a: f64, b: f64, out: *mut f64) -> RpoStatus {
    guard(|| write(out, distance_pair(metric.into(), &pair(b, a))?, "out"))
}

/// `∂D/∂a` of the pair distance.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_distance_pair_grad(
    metric: RpoMetric,
    a: f64,
    b: f64,
    out: *mut f64,
) -> RpoStatus {
    guard(|| write(out, distance_pair_grad(metric.into(), &pair(b, a))?, "out"))
}

/// Multi-response distance over `k` entries.
///
/// # Safety
/// `a` and `b` must point to `k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_distance_multi(
    metric: RpoMetric,
    a: *const f64,
    b: *const f64,
    k: usize,
    out: *mut f64,
) -> RpoStatus {
    guard(|| {
        let a = RewardVector::new(slice(a, k, "a")?.to_vec())?;
        let b = RewardVector::new(slice(b, k, "b")?.to_vec())?;
        write(out, distance_multi(metric.into(), &a, &b)?, "out")
    })
}

/// `∂D/∂a_k` of the multi-response distance, written to `out[0..k]`.
///
/// # Safety
/// `a`, `b` and `out` must point to `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_distance_multi_grad(
    metric: RpoMetric,
    a: *const f64,
    b: *const f64,
    k: usize,
    out: *mut f64,
) -> RpoStatus {
    guard(|| {
        let a = RewardVector::new(slice(a, k, "a")?.to_vec())?;
        let b = RewardVector::new(slice(b, k, "b")?.to_vec())?;
        let g = distance_multi_grad(metric.into(), &a, &b)?;
        slice_mut(out, k, "out")?.copy_from_slice(g.as_slice());
        Ok(())
    })
}

/// Max-subtracted softmax of `n` logits.
///
/// # Safety
/// `x` and `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_softmax(x: *const f64, n: usize, out: *mut f64) -> RpoStatus {
    guard(|| {
        if n == 0 {
            return Err(Fail(RpoStatus::InvalidArgument, "empty input".into()));
        }
        let v = slice(x, n, "x")?.to_vec();
        if v.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("softmax input").into());
        }
        let p = softmax(&RewardVector::new(v)?);
        slice_mut(out, n, "out")?.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Online scales `S_k = ∂D/∂a_k` at `a = implicit`, `b = eta · explicit`.
///
/// # Safety
/// `implicit`, `explicit` and `out` must point to `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_score_scales(
    metric: RpoMetric,
    implicit: *const f64,
    explicit: *const f64,
    k: usize,
    eta: f64,
    out: *mut f64,
) -> RpoStatus {
    guard(|| {
        let a = RewardVector::new(slice(implicit, k, "implicit")?.to_vec())?;
        let b = RewardVector::new(slice(explicit, k, "explicit")?.to_vec())?;
        let s = online_score_scales(metric.into(), &a, &b, eta)?;
        slice_mut(out, k, "out")?.copy_from_slice(s.as_slice());
        Ok(())
    })
}

/// Creates a policy from `contexts × max_len × vocab` row-major logits.
///
/// # Safety
/// `logits` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_new(
    contexts: usize,
    vocab: usize,
    max_len: usize,
    logits: *const f64,
    n: usize,
    out: *mut *mut RpoPolicy,
) -> RpoStatus {
    guard(|| {
        let v = Vocab::new(vocab, max_len)?;
        let inner = FactorizedPolicy::from_logits(contexts, v, slice(logits, n, "logits")?.to_vec())?;
        write(out, Box::into_raw(Box::new(RpoPolicy { inner })), "out")
    })
}

/// Reads a policy from its JSON checkpoint form.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_from_json(json: *const c_char, out: *mut *mut RpoPolicy) -> RpoStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Fail(RpoStatus::InvalidArgument, e.to_string()))?;
        let p: FactorizedPolicy =
            serde_json::from_str(text).map_err(|e| Fail(RpoStatus::InvalidArgument, e.to_string()))?;
        let inner = FactorizedPolicy::from_logits(p.contexts(), p.vocab(), p.logits().to_vec())?;
        write(out, Box::into_raw(Box::new(RpoPolicy { inner })), "out")
    })
}

/// Serializes a policy to JSON; release the string with [`rpo_string_free`].
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_to_json(policy: *const RpoPolicy, out: *mut *mut c_char) -> RpoStatus {
    guard(|| {
        let p = self::policy(policy, "policy")?;
        let text = serde_json::to_string(p).map_err(|e| Fail(RpoStatus::Internal, e.to_string()))?;
        let c = CString::new(text).map_err(|e| Fail(RpoStatus::Internal, e.to_string()))?;
        write(out, c.into_raw(), "out")
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rpo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases a policy handle.
///
/// # Safety
/// `policy` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_free(policy: *mut RpoPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of logits, `contexts × max_len × vocab`.
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_num_logits(policy: *const RpoPolicy, out: *mut usize) -> RpoStatus {
    guard(|| write(out, self::policy(policy, "policy")?.logits().len(), "out"))
}

/// Copies the logits into `out[0..n]`; `n` must equal the logit count.
///
/// # Safety
/// `policy` must be a live handle; `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_logits(policy: *const RpoPolicy, out: *mut f64, n: usize) -> RpoStatus {
    guard(|| {
        let p = self::policy(policy, "policy")?;
        check_len(n, p.logits().len())?;
        slice_mut(out, n, "out")?.copy_from_slice(p.logits());
        Ok(())
    })
}

fn check_len(got: usize, want: usize) -> Result<(), Fail> {
    if got == want {
        Ok(())
    } else {
        Err(Fail(
            RpoStatus::ShapeMismatch,
            format!("buffer holds {got} values, need {want}"),
        ))
    }
}

/// # Safety
/// `tokens` must point to `len` values.
unsafe fn response(tokens: *const u32, len: usize) -> Result<Response, Fail> {
    if len > 0 && tokens.is_null() {
        return Err(null("tokens"));
    }
    let t = if len == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(tokens, len).to_vec()
    };
    Ok(Response(t))
}

/// `log π(y | context)`.
///
/// # Safety
/// `policy` must be a live handle; `tokens` must point to `len` values;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_log_prob(
    policy: *const RpoPolicy,
    context: usize,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
) -> RpoStatus {
    guard(|| {
        let p = self::policy(policy, "policy")?;
        let y = response(tokens, len)?;
        write(out, p.log_prob(context, &y)?, "out")
    })
}

/// Gradient of `log π(y | context)` with respect to that context's
/// `max_len × vocab` logit block, written to `out[0..n]`.
///
/// # Safety
/// `policy` must be a live handle; `tokens` must point to `len` values;
/// `out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_log_prob_grad(
    policy: *const RpoPolicy,
    context: usize,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
    n: usize,
) -> RpoStatus {
    guard(|| {
        let p = self::policy(policy, "policy")?;
        let v = p.vocab();
        check_len(n, v.max_len * v.size)?;
        let y = response(tokens, len)?;
        let g = p.log_prob_grad(context, &y)?;
        slice_mut(out, n, "out")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Exact `KL[π(·|context) ‖ ref(·|context)]`.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_policy_kl(
    policy: *const RpoPolicy,
    reference: *const RpoPolicy,
    context: usize,
    out: *mut f64,
) -> RpoStatus {
    guard(|| {
        let p = self::policy(policy, "policy")?;
        let r = self::policy(reference, "reference")?;
        write(out, p.exact_kl(r, context)?, "out")
    })
}

/// Runs the identity suite; returns `IdentityFailure` when any identity
/// fails and writes the number of failures to `failures`.
///
/// # Safety
/// `failures` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rpo_identity_check(trials: usize, seed: u64, failures: *mut usize) -> RpoStatus {
    let mut failed = Vec::new();
    let status = guard(|| {
        for r in run_identity_checks(&IdentityOptions::new(trials, seed))? {
            if !r.passed {
                failed.push(r.name);
            }
        }
        if !failures.is_null() {
            failures.write(failed.len());
        }
        Ok(())
    });
    if status == RpoStatus::Ok && !failed.is_empty() {
        set_error(format!("identity failures: {}", failed.join(", ")));
        return RpoStatus::IdentityFailure;
    }
    status
}
