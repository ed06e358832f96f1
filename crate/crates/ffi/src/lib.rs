//! C ABI for the `wolbachia` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new` functions
//! and released by the matching `*_free`. Every fallible call returns a
//! [`WolStatus`]; on failure [`wol_last_error`] describes the problem for the
//! calling thread. Outputs are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wolbachia::adjoint::{cost_and_gradient_full, cost_and_gradient_reduced, GradientMethod};
use wolbachia::integrator::{ControlSignal, NewtonOptions, TimeGrid};
use wolbachia::optimizer::{default_inits, optimize, AdmissibleSet, FullProblem, OptimOptions, ReducedProblem};
use wolbachia::reduced::{self, ReducedModel};
use wolbachia::slowfast::{self, SlowFastParams, SlowFastState};
use wolbachia::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WolStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Parameters admit no coexistence state, so the reduced model is undefined.
    NoCoexistence = 3,
    /// Newton failure, population collapse or another numerical breakdown.
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Biology plus scaling parameter.
pub struct WolModel {
    params: SlowFastParams,
    reduced: Option<ReducedModel>,
}

/// Piecewise-constant control on a uniform grid.
pub struct WolControl {
    inner: ControlSignal,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WolStatus {
    match e {
        Error::NoCoexistence { .. } => WolStatus::NoCoexistence,
        e if e.is_config_error() => WolStatus::InvalidArgument,
        Error::NonFinite(_) | Error::InsufficientFlux { .. } => WolStatus::InvalidArgument,
        _ => WolStatus::Numerical,
    }
}

struct Fail(WolStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WolStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WolStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            WolStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(WolStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(WolStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(WolStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, need: usize, name: &str) -> Result<&'a mut [f64], Fail> {
    if len < need {
        return Err(Fail(WolStatus::BufferTooSmall, format!("{name} holds {len} values, {need} needed")));
    }
    if p.is_null() {
        return Err(Fail(WolStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

impl WolModel {
    fn reduced(&self) -> Result<&ReducedModel, Fail> {
        self.reduced.as_ref().ok_or_else(|| {
            let e = ReducedModel::new(self.params).expect_err("reduced model was rejected at construction");
            Fail::from(e)
        })
    }
}

fn model_handle(params: SlowFastParams) -> Result<*mut WolModel, Fail> {
    params.validate()?;
    let reduced = ReducedModel::new(params).ok();
    Ok(Box::into_raw(Box::new(WolModel { params, reduced })))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wol_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wol_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Model from birth rates `b1_0, b2_0`, death rates, cytoplasmic
/// incompatibility `s_h`, carrying capacity `k` and scaling `eps`.
///
/// # Safety
/// `model` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn wol_model_new(
    b1_0: f64,
    b2_0: f64,
    d1: f64,
    d2: f64,
    s_h: f64,
    k: f64,
    eps: f64,
    model: *mut *mut WolModel,
) -> WolStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = model_handle(SlowFastParams {
            b1_0,
            b2_0,
            d1,
            d2,
            s_h,
            k,
            eps,
        })?;
        Ok(())
    })
}

/// Reference biology (`b1_0 = 1, b2_0 = 0.9, d1 = 0.27, d2 = 0.3, s_h = 0.9, K = 1`).
///
/// # Safety
/// `model` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn wol_model_reference(eps: f64, model: *mut *mut WolModel) -> WolStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = model_handle(SlowFastParams::table1(eps))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `wol_model_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wol_model_free(model: *mut WolModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Invasion threshold `theta` of the reduced equation.
///
/// # Safety
/// `model` must be a live handle and `theta` writable.
#[no_mangle]
pub unsafe extern "C" fn wol_model_theta(model: *const WolModel, theta: *mut f64) -> WolStatus {
    guard(|| {
        let r = get(model, "model")?.reduced()?;
        *out(theta, "theta")? = r.theta;
        Ok(())
    })
}

/// Budget threshold `C*(M)` separating late from early release.
///
/// # Safety
/// `model` must be a live handle and `c_star` writable.
#[no_mangle]
pub unsafe extern "C" fn wol_model_c_star(model: *const WolModel, m: f64, c_star: *mut f64) -> WolStatus {
    guard(|| {
        let r = get(model, "model")?.reduced()?;
        let v = reduced::c_star(m, r)?;
        *out(c_star, "c_star")? = v;
        Ok(())
    })
}

/// Control on `steps` equal cells of `[0, horizon]` from `steps` values.
///
/// # Safety
/// `values` must point to `steps` readable doubles and `control` be writable.
#[no_mangle]
pub unsafe extern "C" fn wol_control_new(
    horizon: f64,
    steps: usize,
    values: *const f64,
    control: *mut *mut WolControl,
) -> WolStatus {
    guard(|| {
        let slot = out(control, "control")?;
        let grid = TimeGrid::new(horizon, steps)?;
        let v = slice(values, steps, "values")?.to_vec();
        let inner = ControlSignal::new(grid, v)?;
        *slot = Box::into_raw(Box::new(WolControl { inner }));
        Ok(())
    })
}

/// Closed-form optimum of the reduced problem for budget `c` and cap `m`.
///
/// # Safety
/// `model` must be a live handle and `control` writable.
#[no_mangle]
pub unsafe extern "C" fn wol_control_reduced_optimum(
    model: *const WolModel,
    horizon: f64,
    steps: usize,
    c: f64,
    m: f64,
    control: *mut *mut WolControl,
) -> WolStatus {
    guard(|| {
        let r = get(model, "model")?.reduced()?;
        let slot = out(control, "control")?;
        let sol = reduced::solve_reduced_analytic(TimeGrid::new(horizon, steps)?, c, m, r)?;
        *slot = Box::into_raw(Box::new(WolControl { inner: sol.control }));
        Ok(())
    })
}

/// # Safety
/// `control` must be null or a handle from `wol_control_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wol_control_free(control: *mut WolControl) {
    if !control.is_null() {
        drop(Box::from_raw(control));
    }
}

/// Number of cells, or 0 for a null handle.
///
/// # Safety
/// `control` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wol_control_len(control: *const WolControl) -> usize {
    control.as_ref().map_or(0, |c| c.inner.values.len())
}

/// `dt * sum(u)`.
///
/// # Safety
/// `control` must be a live handle and `budget` writable.
#[no_mangle]
pub unsafe extern "C" fn wol_control_budget(control: *const WolControl, budget: *mut f64) -> WolStatus {
    guard(|| {
        let c = get(control, "control")?;
        *out(budget, "budget")? = c.inner.budget();
        Ok(())
    })
}

/// Copies the cell values into `buf`, which must hold `wol_control_len` doubles.
///
/// # Safety
/// `control` must be a live handle and `buf` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn wol_control_values(control: *const WolControl, buf: *mut f64, len: usize) -> WolStatus {
    guard(|| {
        let c = get(control, "control")?;
        let dst = slice_mut(buf, len, c.inner.values.len(), "buf")?;
        dst[..c.inner.values.len()].copy_from_slice(&c.inner.values);
        Ok(())
    })
}

/// Final `(n1, n2)` of the full system started at the wild equilibrium.
///
/// # Safety
/// Handles must be live and `n1`, `n2` writable.
#[no_mangle]
pub unsafe extern "C" fn wol_simulate_full(
    model: *const WolModel,
    control: *const WolControl,
    n1: *mut f64,
    n2: *mut f64,
) -> WolStatus {
    guard(|| {
        let m = get(model, "model")?;
        let c = get(control, "control")?;
        let (o1, o2) = (out(n1, "n1")?, out(n2, "n2")?);
        let traj = slowfast::simulate(&c.inner, &m.params, &NewtonOptions::default(), false)?;
        let pop = slowfast::from_slowfast(SlowFastState::from(*traj.last()), m.params.eps, m.params.k)?;
        *o1 = pop.n1;
        *o2 = pop.n2;
        Ok(())
    })
}

/// Cost of `control` and, when `grad` is non-null, its gradient with
/// respect to the cell values. `reduced != 0` selects the scalar reduced
/// model instead of the full system.
///
/// # Safety
/// Handles must be live, `cost` writable and `grad` null or `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn wol_cost_and_gradient(
    model: *const WolModel,
    control: *const WolControl,
    reduced: i32,
    cost: *mut f64,
    grad: *mut f64,
    len: usize,
) -> WolStatus {
    guard(|| {
        let m = get(model, "model")?;
        let c = get(control, "control")?;
        let cost = out(cost, "cost")?;
        let dst = if grad.is_null() {
            None
        } else {
            Some(slice_mut(grad, len, c.inner.values.len(), "grad")?)
        };
        let (j, g) = if reduced != 0 {
            cost_and_gradient_reduced(&c.inner, m.reduced()?, GradientMethod::Discrete)?
        } else {
            cost_and_gradient_full(&c.inner, &m.params, GradientMethod::Discrete)?
        };
        *cost = j;
        if let Some(d) = dst {
            d[..g.values.len()].copy_from_slice(&g.values);
        }
        Ok(())
    })
}

/// Projected-gradient optimum over `0 <= u <= m`, `dt sum(u) <= c` on a
/// `steps`-cell grid of `[0, horizon]`, from the standard starting controls.
///
/// # Safety
/// `model` must be a live handle; `control` and `cost` writable.
#[no_mangle]
pub unsafe extern "C" fn wol_optimize(
    model: *const WolModel,
    horizon: f64,
    steps: usize,
    c: f64,
    m: f64,
    reduced: i32,
    max_iter: usize,
    control: *mut *mut WolControl,
    cost: *mut f64,
) -> WolStatus {
    guard(|| {
        let model = get(model, "model")?;
        let slot = out(control, "control")?;
        let cost = out(cost, "cost")?;
        let set = AdmissibleSet::new(TimeGrid::new(horizon, steps)?, c, m)?;
        let analytic = match model.reduced.as_ref() {
            Some(r) => reduced::solve_reduced_analytic(set.grid, c, m, r).ok().map(|s| s.control),
            None => None,
        };
        let inits = default_inits(&set, analytic.as_ref(), 7)?;
        let opts = OptimOptions {
            max_iter,
            ..OptimOptions::default()
        };
        let res = if reduced != 0 {
            let problem = ReducedProblem {
                model: *model.reduced()?,
                method: GradientMethod::Discrete,
            };
            optimize(&problem, &set, &opts, &inits)?
        } else {
            optimize(&FullProblem::new(model.params, GradientMethod::Discrete), &set, &opts, &inits)?
        };
        *cost = res.cost;
        *slot = Box::into_raw(Box::new(WolControl { inner: res.control }));
        Ok(())
    })
}
