//! C ABI over `sdde-core`.
//!
//! Every fallible function returns an [`SddeStatus`]; on failure a message is
//! available from [`sdde_last_error_message`] on the same thread. Objects are
//! opaque handles released with their `*_free` function. Output arrays are
//! caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use sdde_core::analysis::{self, TransferDirection};
use sdde_core::model::{self, CoefficientFn, InitialSegment, ProblemParams, SegmentFn};
use sdde_core::noise::LatticeFamily;
use sdde_core::scheme::{self, SchemeRun, SchemeVariant, TrajectoryEnsemble, TruncationPolicy};
use sdde_core::{SddeError, SddeProblem};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SddeStatus {
    Ok = 0,
    InvalidArgument = 1,
    NumericRange = 2,
    Config = 3,
    Io = 4,
    NullPointer = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SddeTransferDirection {
    SddeToScheme = 0,
    SchemeToSdde = 1,
}

/// Result of [`sdde_transfer_constants`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SddeTransferConstants {
    pub window_t: f64,
    pub output_rate: f64,
    pub output_growth: f64,
}

/// An equation: coefficients, delay and initial segment.
pub struct SddeProblemHandle(SddeProblem);

/// A truncation policy.
pub struct SddePolicyHandle(TruncationPolicy);

/// Simulated paths on the grid `k = -M..=K`.
pub struct SddeEnsembleHandle(TrajectoryEnsemble);

/// `out[i] = coefficient(x, y)[i]`; `x` and `y` have `dim` entries.
pub type SddeCoefficientCallback =
    Option<extern "C" fn(x: *const f64, y: *const f64, out: *mut f64, user_data: *mut c_void)>;

/// `out = ξ(u)` for `u` in `[-τ, 0]`.
pub type SddeInitialCallback = Option<extern "C" fn(u: f64, out: *mut f64, user_data: *mut c_void)>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

enum Failure {
    Null(&'static str),
    Core(SddeError),
}

impl From<SddeError> for Failure {
    fn from(e: SddeError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn report(failure: Failure) -> SddeStatus {
    let (status, msg) = match failure {
        Failure::Null(what) => (SddeStatus::NullPointer, format!("{what} is null")),
        Failure::Core(e) => {
            let status = match e {
                SddeError::Argument(_) => SddeStatus::InvalidArgument,
                SddeError::NumericRange { .. } => SddeStatus::NumericRange,
                SddeError::Config(_) => SddeStatus::Config,
                SddeError::Io { .. } => SddeStatus::Io,
            };
            (status, e.to_string())
        }
    };
    set_error(msg);
    status
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> SddeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SddeStatus::Ok,
        Ok(Err(e)) => report(e),
        Err(_) => {
            set_error("internal panic");
            SddeStatus::Panic
        }
    }
}


unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(SddeError::Argument(format!("{what} is not valid UTF-8"))))
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sdde_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sdde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a registry problem (`"paper-example-2d"`, `"linear-scalar"`,
/// `"superlinear-blowup"`) with optional named scalar parameters.
///
/// # Safety
/// `key` must be a NUL-terminated string; `names` and `values` must hold
/// `n_params` entries (each name NUL-terminated); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_problem_from_registry(
    key: *const c_char,
    names: *const *const c_char,
    values: *const f64,
    n_params: usize,
    out: *mut *mut SddeProblemHandle,
) -> SddeStatus {
    guard(|| {
        let key = str_arg(key, "key")?;
        let names = slice(names, n_params, "names")?;
        let values = slice(values, n_params, "values")?;
        let mut params = ProblemParams::new();
        for (n, v) in names.iter().zip(values) {
            params.insert(str_arg(*n, "parameter name")?.to_owned(), *v);
        }
        let entry = model::lookup(key, &params)?;
        write_out(out, Box::into_raw(Box::new(SddeProblemHandle(entry.problem))), "out")
    })
}

#[derive(Clone, Copy)]
struct UserData(*mut c_void);

// SAFETY: the caller promises that the callbacks may be invoked from any
// thread with this pointer (documented on `sdde_problem_from_callbacks`).
unsafe impl Send for UserData {}
unsafe impl Sync for UserData {}

impl UserData {
    fn get(self) -> *mut c_void {
        self.0
    }
}

type CoefficientCallback = extern "C" fn(*const f64, *const f64, *mut f64, *mut c_void);

fn coefficient(cb: CoefficientCallback, data: UserData) -> CoefficientFn {
    Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| cb(x.as_ptr(), y.as_ptr(), out.as_mut_ptr(), data.get()))
}

/// Builds a problem from C callbacks. The drift writes `dim` values, the
/// diffusion a row-major `dim × noise_dim` matrix, the initial segment `dim`
/// values. The segment is declared `holder_exponent`-Hölder with constant
/// `holder_constant`.
///
/// # Safety
/// `name` must be NUL-terminated. The callbacks and `user_data` must stay
/// valid until the problem and every ensemble built from it are freed, and
/// must be safe to call concurrently from several threads.
#[no_mangle]
pub unsafe extern "C" fn sdde_problem_from_callbacks(
    name: *const c_char,
    dim: usize,
    noise_dim: usize,
    tau: f64,
    drift: SddeCoefficientCallback,
    diffusion: SddeCoefficientCallback,
    initial: SddeInitialCallback,
    user_data: *mut c_void,
    holder_exponent: f64,
    holder_constant: f64,
    origin_fixed: bool,
    out: *mut *mut SddeProblemHandle,
) -> SddeStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let (drift, diffusion, initial) = match (drift, diffusion, initial) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Failure::Null("callback")),
        };
        let data = UserData(user_data);
        let values: SegmentFn = Arc::new(move |u: f64, o: &mut [f64]| initial(u, o.as_mut_ptr(), data.get()));
        let segment = InitialSegment::from_fn(dim, values, holder_exponent, holder_constant)?;
        let problem = SddeProblem::new(
            name,
            dim,
            noise_dim,
            tau,
            coefficient(drift, data),
            coefficient(diffusion, data),
            segment,
            origin_fixed,
        )?;
        write_out(out, Box::into_raw(Box::new(SddeProblemHandle(problem))), "out")
    })
}

/// # Safety
/// `problem` must come from a `sdde_problem_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn sdde_problem_free(problem: *mut SddeProblemHandle) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

/// State dimension of `problem`, or 0 if it is null.
///
/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sdde_problem_dim(problem: *const SddeProblemHandle) -> usize {
    problem.as_ref().map_or(0, |p| p.0.dim())
}

/// Noise dimension of `problem`, or 0 if it is null.
///
/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sdde_problem_noise_dim(problem: *const SddeProblemHandle) -> usize {
    problem.as_ref().map_or(0, |p| p.0.noise_dim())
}

/// `out = f(x, y)` with `dim` entries.
///
/// # Safety
/// `x`, `y` and `out` must hold `dim` entries.
#[no_mangle]
pub unsafe extern "C" fn sdde_problem_eval_drift(
    problem: *const SddeProblemHandle,
    x: *const f64,
    y: *const f64,
    out: *mut f64,
) -> SddeStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let n = p.dim();
        p.drift_into(slice(x, n, "x")?, slice(y, n, "y")?, slice_mut(out, n, "out")?)?;
        Ok(())
    })
}

/// `out = g(x, y)`, row-major with `dim × noise_dim` entries.
///
/// # Safety
/// `x` and `y` must hold `dim` entries, `out` `dim × noise_dim`.
#[no_mangle]
pub unsafe extern "C" fn sdde_problem_eval_diffusion(
    problem: *const SddeProblemHandle,
    x: *const f64,
    y: *const f64,
    out: *mut f64,
) -> SddeStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let n = p.dim();
        p.diffusion_into(slice(x, n, "x")?, slice(y, n, "y")?, slice_mut(out, n * p.noise_dim(), "out")?)?;
        Ok(())
    })
}

/// Truncation policy with `μ(u) = h3·u^{(2+ρ)/2}` and `h(Δ) = h_hat·Δ^{-ε}`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_policy_new(
    h3: f64,
    rho: f64,
    h_hat: f64,
    epsilon: f64,
    out: *mut *mut SddePolicyHandle,
) -> SddeStatus {
    guard(|| {
        let policy = TruncationPolicy::new(h3, rho, h_hat, epsilon)?;
        write_out(out, Box::into_raw(Box::new(SddePolicyHandle(policy))), "out")
    })
}

/// # Safety
/// `policy` must come from [`sdde_policy_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sdde_policy_free(policy: *mut SddePolicyHandle) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Radius `μ⁻¹(h(Δ))` of the truncation ball at step `delta`.
///
/// # Safety
/// `policy` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_policy_truncation_radius(
    policy: *const SddePolicyHandle,
    delta: f64,
    out: *mut f64,
) -> SddeStatus {
    guard(|| {
        let r = handle(policy, "policy")?.0.truncation_radius(delta)?;
        write_out(out, r, "out")
    })
}

/// Threshold `h(Δ) = ĥ Δ^{-ε}` at step `delta`.
///
/// # Safety
/// `policy` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_policy_h(policy: *const SddePolicyHandle, delta: f64, out: *mut f64) -> SddeStatus {
    guard(|| {
        let h = handle(policy, "policy")?.0.h(delta)?;
        write_out(out, h, "out")
    })
}

unsafe fn variant(policy: *const SddePolicyHandle) -> SchemeVariant {
    match policy.as_ref() {
        Some(p) => SchemeVariant::Truncated(p.0),
        None => SchemeVariant::Classical,
    }
}

/// Simulates `n_paths` paths with step `τ / m_sub` up to `horizon`. A null
/// `policy` selects the classical scheme.
///
/// # Safety
/// `problem` must be live, `policy` live or null, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_simulate(
    problem: *const SddeProblemHandle,
    policy: *const SddePolicyHandle,
    m_sub: usize,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    out: *mut *mut SddeEnsembleHandle,
) -> SddeStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let run = SchemeRun::new(p.clone(), variant(policy), m_sub, horizon)?;
        let family = LatticeFamily::new(seed, run.delta(), p.noise_dim())?;
        let ensemble = scheme::simulate(&run, &family, n_paths)?;
        write_out(out, Box::into_raw(Box::new(SddeEnsembleHandle(ensemble))), "out")
    })
}

/// # Safety
/// `ensemble` must come from [`sdde_simulate`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sdde_ensemble_free(ensemble: *mut SddeEnsembleHandle) {
    if !ensemble.is_null() {
        drop(Box::from_raw(ensemble));
    }
}

/// Number of paths, or 0 for a null handle.
///
/// # Safety
/// `ensemble` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn sdde_ensemble_n_paths(ensemble: *const SddeEnsembleHandle) -> usize {
    ensemble.as_ref().map_or(0, |e| e.0.n_paths())
}

/// Stored grid points per path, `M + K + 1`, or 0 for a null handle.
///
/// # Safety
/// `ensemble` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn sdde_ensemble_points_per_path(ensemble: *const SddeEnsembleHandle) -> usize {
    ensemble.as_ref().map_or(0, |e| e.0.points_per_path())
}

/// Copies `X_k` of `path` (`dim` values) into `out`; `k` ranges over
/// `-M..=K`.
///
/// # Safety
/// `ensemble` must be live and `out` hold `dim` entries.
#[no_mangle]
pub unsafe extern "C" fn sdde_ensemble_state(
    ensemble: *const SddeEnsembleHandle,
    path: usize,
    k: i64,
    out: *mut f64,
) -> SddeStatus {
    guard(|| {
        let e = &handle(ensemble, "ensemble")?.0;
        let range = e.grid_indices();
        if path >= e.n_paths() || !range.contains(&k) {
            return Err(SddeError::Argument(format!(
                "path {path} or index {k} out of range ({} paths, k in {range:?})",
                e.n_paths()
            ))
            .into());
        }
        let state = e.state(path, k);
        slice_mut(out, state.len(), "out")?.copy_from_slice(state);
        Ok(())
    })
}

/// Whether `path` was flagged as blown up (classical scheme only).
///
/// # Safety
/// `ensemble` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_ensemble_flagged(ensemble: *const SddeEnsembleHandle, path: usize, out: *mut bool) -> SddeStatus {
    guard(|| {
        let e = &handle(ensemble, "ensemble")?.0;
        if path >= e.n_paths() {
            return Err(SddeError::Argument(format!("path {path} out of range")).into());
        }
        write_out(out, e.flagged(path), "out")
    })
}

/// Strong errors `Ê|x_ref(T) - x_Δ(T)|^q̄` for each of `n_deltas` steps
/// against the reference step `τ / reference_m_sub`, on coupled paths.
/// `errors` and `std_errors` receive values in descending order of Δ;
/// `fitted_order` receives the strong order, or NaN with fewer than two
/// positive errors.
///
/// # Safety
/// `deltas`, `errors` and `std_errors` must hold `n_deltas` entries;
/// `fitted_order` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_strong_error(
    problem: *const SddeProblemHandle,
    policy: *const SddePolicyHandle,
    deltas: *const f64,
    n_deltas: usize,
    reference_m_sub: usize,
    q_bar: f64,
    n_paths: usize,
    horizon: f64,
    seed: u64,
    errors: *mut f64,
    std_errors: *mut f64,
    fitted_order: *mut f64,
) -> SddeStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let deltas = slice(deltas, n_deltas, "deltas")?;
        let r = analysis::strong_error(p, variant(policy), deltas, reference_m_sub, q_bar, n_paths, horizon, seed)?;
        slice_mut(errors, n_deltas, "errors")?.copy_from_slice(&r.errors);
        slice_mut(std_errors, n_deltas, "std_errors")?.copy_from_slice(&r.std_errors);
        write_out(fitted_order, r.fitted_order.unwrap_or(f64::NAN), "fitted_order")
    })
}

/// Rate `r/2`, window `T` and growth `2^{p+1} G C* e^{rT/2}` carried across
/// the equation/scheme boundary.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_transfer_constants(
    direction: SddeTransferDirection,
    rate: f64,
    growth: f64,
    p: f64,
    tau: f64,
    c_star: f64,
    out: *mut SddeTransferConstants,
) -> SddeStatus {
    guard(|| {
        let direction = match direction {
            SddeTransferDirection::SddeToScheme => TransferDirection::SddeToScheme,
            SddeTransferDirection::SchemeToSdde => TransferDirection::SchemeToSdde,
        };
        let t = analysis::transfer_constants(direction, rate, growth, p, tau, c_star)?;
        write_out(
            out,
            SddeTransferConstants {
                window_t: t.window_t,
                output_rate: t.output_rate,
                output_growth: t.output_growth,
            },
            "out",
        )
    })
}

/// Whether `2^p C α + 2^p H e^{-γ(T-2τ)} ≤ e^{-γT/2}` holds.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdde_check_transfer_condition(
    c_of_t: f64,
    alpha_of_delta: f64,
    p: f64,
    growth: f64,
    rate: f64,
    window_t: f64,
    tau: f64,
    out: *mut bool,
) -> SddeStatus {
    guard(|| {
        let holds = analysis::check_transfer_condition(c_of_t, alpha_of_delta, p, growth, rate, window_t, tau)?;
        write_out(out, holds, "out")
    })
}
