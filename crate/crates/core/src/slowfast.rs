//! Birth rates scaled as `b_i = b_i⁰ / eps`, written in the variables
//! `n = (1 - N/K) / eps` (scaled total deficit) and `p = n2 / N` (infected
//! frequency), with `N = n1 + n2`.
//!
//! In these variables the deficit relaxes on the fast `O(eps)` time scale
//! while the frequency moves on the slow one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, ControlSignal, NewtonOptions, OdeSystem, Trajectory};
use crate::model::{objective_j, objective_j_gradient, ModelParams, PopulationState};

/// `1 - eps n` below this is treated as a collapsed population.
pub const COLLAPSE_MARGIN: f64 = 1e-12;

const P_SAMPLES: usize = 2001;
const EPS_SAMPLES: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowFastParams {
    pub b1_0: f64,
    pub b2_0: f64,
    pub d1: f64,
    pub d2: f64,
    pub s_h: f64,
    pub k: f64,
    pub eps: f64,
}

impl SlowFastParams {
    /// Reference biology: `b1⁰ = 1, b2⁰ = 0.9, d1 = 0.27, d2 = 0.3, s_h = 0.9, K = 1`.
    pub fn table1(eps: f64) -> Self {
        SlowFastParams {
            b1_0: 1.0,
            b2_0: 0.9,
            d1: 0.27,
            d2: 0.3,
            s_h: 0.9,
            k: 1.0,
            eps,
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        SlowFastParams { eps, ..*self }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("b1_0", self.b1_0),
            ("b2_0", self.b2_0),
            ("d1", self.d1),
            ("d2", self.d2),
            ("K", self.k),
            ("eps", self.eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("{name} must be finite and > 0 (got {v})"));
            }
        }
        if !(self.s_h.is_finite() && (0.0..=1.0).contains(&self.s_h)) {
            out.push(format!("s_h must lie in [0, 1] (got {})", self.s_h));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(v.join("; ")))
        }
    }

    /// Unscaled parameters with `b_i = b_i⁰ / eps`.
    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            b1: self.b1_0 / self.eps,
            b2: self.b2_0 / self.eps,
            d1: self.d1,
            d2: self.d2,
            s_h: self.s_h,
            k: self.k,
        }
    }

    /// `a(p) = b1⁰ (1-p)(1 - s_h p) + b2⁰ p`.
    #[inline]
    pub fn a(&self, p: f64) -> f64 {
        self.b1_0 * (1.0 - p) * (1.0 - self.s_h * p) + self.b2_0 * p
    }

    #[inline]
    fn a_prime(&self, p: f64) -> f64 {
        self.b1_0 * (2.0 * self.s_h * p - 1.0 - self.s_h) + self.b2_0
    }

    /// `Z(p) = (d1 (1-p) + d2 p) / a(p)`.
    #[inline]
    pub fn z(&self, p: f64) -> f64 {
        (self.d1 * (1.0 - p) + self.d2 * p) / self.a(p)
    }

    /// Slow-fast initial condition: the wild equilibrium, `(d1/b1⁰, 0)`.
    pub fn initial_state(&self) -> SlowFastState {
        SlowFastState {
            n: self.d1 / self.b1_0,
            p: 0.0,
        }
    }

    /// `(dn/dt, dp/dt)` without domain checks.
    #[inline]
    pub(crate) fn field(&self, n: f64, p: f64, u: f64) -> [f64; 2] {
        let e = 1.0 - self.eps * n;
        let a = self.a(p);
        let c = self.d1 * (1.0 - p) + self.d2 * p;
        let h = self.b2_0 - self.b1_0 * (1.0 - self.s_h * p);
        [
            (e * (c - a * n) - u / self.k) / self.eps,
            p * (1.0 - p) * (n * h + self.d1 - self.d2) + u * (1.0 - p) / (self.k * e),
        ]
    }

    /// Gradient of the terminal cost with respect to the final `(n, p)`.
    pub fn terminal_cost_gradient(&self, state: SlowFastState) -> [f64; 2] {
        let full = from_slowfast_unchecked(state, self.eps, self.k);
        let [g1, g2] = objective_j_gradient(full, &self.model_params());
        let e = 1.0 - self.eps * state.n;
        // n1 = K (1-p) e, n2 = K p e
        let dn1_dn = -self.eps * self.k * (1.0 - state.p);
        let dn1_dp = -self.k * e;
        let dn2_dn = -self.eps * self.k * state.p;
        let dn2_dp = self.k * e;
        [g1 * dn1_dn + g2 * dn2_dn, g1 * dn1_dp + g2 * dn2_dp]
    }
}

impl OdeSystem<2> for SlowFastParams {
    fn rhs(&self, x: &[f64; 2], u: f64, _t: f64) -> [f64; 2] {
        self.field(x[0], x[1], u)
    }

    fn jacobian(&self, x: &[f64; 2], u: f64, _t: f64) -> [[f64; 2]; 2] {
        let (n, p) = (x[0], x[1]);
        let eps = self.eps;
        let e = 1.0 - eps * n;
        let a = self.a(p);
        let c = self.d1 * (1.0 - p) + self.d2 * p;
        let h = self.b2_0 - self.b1_0 * (1.0 - self.s_h * p);
        [
            [
                -(c - a * n) - e * a / eps,
                e * ((self.d2 - self.d1) - self.a_prime(p) * n) / eps,
            ],
            [
                p * (1.0 - p) * h + u * (1.0 - p) * eps / (self.k * e * e),
                (1.0 - 2.0 * p) * (n * h + self.d1 - self.d2) + p * (1.0 - p) * n * self.b1_0 * self.s_h
                    - u / (self.k * e),
            ],
        ]
    }

    fn control_jacobian(&self, x: &[f64; 2], _u: f64, _t: f64) -> [f64; 2] {
        let e = 1.0 - self.eps * x[0];
        [-1.0 / (self.eps * self.k), (1.0 - x[1]) / (self.k * e)]
    }

    fn check_state(&self, x: &[f64; 2]) -> Result<()> {
        let margin = 1.0 - self.eps * x[0];
        if margin <= COLLAPSE_MARGIN || !margin.is_finite() {
            Err(Error::PopulationCollapse { step: None, margin })
        } else {
            Ok(())
        }
    }
}

/// Scaled deficit `n` and infected frequency `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowFastState {
    pub n: f64,
    pub p: f64,
}

impl SlowFastState {
    pub fn as_array(&self) -> [f64; 2] {
        [self.n, self.p]
    }
}

impl From<[f64; 2]> for SlowFastState {
    fn from(x: [f64; 2]) -> Self {
        SlowFastState { n: x[0], p: x[1] }
    }
}

pub fn a_of_p(p: f64, params: &SlowFastParams) -> f64 {
    params.a(p)
}

pub fn z_of_p(p: f64, params: &SlowFastParams) -> f64 {
    params.z(p)
}

/// Time derivative of `(n, p)`; fails when `1 - eps n <= 1e-12`.
pub fn rhs_slowfast(state: SlowFastState, u: f64, params: &SlowFastParams) -> Result<[f64; 2]> {
    if !(state.n.is_finite() && state.p.is_finite() && u.is_finite()) {
        return Err(Error::NonFinite("rhs_slowfast input"));
    }
    params.check_state(&state.as_array())?;
    Ok(params.field(state.n, state.p, u))
}

pub fn to_slowfast(state: PopulationState, eps: f64, k: f64) -> Result<SlowFastState> {
    let total = state.total();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::EmptyPopulation);
    }
    Ok(SlowFastState {
        n: (1.0 - total / k) / eps,
        p: state.n2 / total,
    })
}

pub fn from_slowfast(state: SlowFastState, eps: f64, k: f64) -> Result<PopulationState> {
    if 1.0 - eps * state.n < 0.0 {
        return Err(Error::PopulationCollapse {
            step: None,
            margin: 1.0 - eps * state.n,
        });
    }
    Ok(from_slowfast_unchecked(state, eps, k))
}

#[inline]
pub(crate) fn from_slowfast_unchecked(state: SlowFastState, eps: f64, k: f64) -> PopulationState {
    let total = k * (1.0 - eps * state.n);
    PopulationState::new((1.0 - state.p) * total, state.p * total)
}

/// A priori bounds on the scaled deficit, valid for every `eps <= eps0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformBounds {
    pub n_minus: f64,
    pub n_plus: f64,
    pub eps0: f64,
}

impl UniformBounds {
    pub fn contains(&self, n: f64, slack: f64) -> bool {
        n >= self.n_minus - slack && n <= self.n_plus + slack
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Sampled extremum on `[lo, hi]` refined by golden section around the best sample.
fn refined_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, samples: usize) -> (f64, f64) {
    let step = (hi - lo) / (samples - 1) as f64;
    let (mut best_x, mut best) = (lo, f(lo));
    for i in 1..samples {
        let x = if i == samples - 1 { hi } else { lo + i as f64 * step };
        let v = f(x);
        if v < best {
            best = v;
            best_x = x;
        }
    }
    let a = (best_x - step).max(lo);
    let b = (best_x + step).min(hi);
    let (x, v) = golden_min(&f, a, b, 80);
    if v < best {
        (x, v)
    } else {
        (best_x, best)
    }
}

/// Smaller root of `a(p)(1 - eps n)(Z(p) - n) = M/K`; at `eps = 0` this is
/// `Z(p) - M/(K a(p))`.
fn lower_root(params: &SlowFastParams, m: f64, eps: f64, p: f64) -> f64 {
    let a = params.a(p);
    let z = params.z(p);
    let c = z - m / (params.k * a);
    let b = 1.0 + eps * z;
    let disc = (1.0 - eps * z).powi(2) + 4.0 * eps * m / (params.k * a);
    // (b - sqrt(disc)) / (2 eps) without the cancellation
    2.0 * c / (b + disc.sqrt())
}

/// Largest admissible `eps0`: `0.99 min(b1⁰/d1, 1/max Z)`.
pub fn default_eps0(params: &SlowFastParams) -> f64 {
    let (_, neg_max_z) = refined_min(|p| -params.z(p), 0.0, 1.0, P_SAMPLES);
    0.99 * (params.b1_0 / params.d1).min(1.0 / (-neg_max_z))
}

pub fn bounds(params: &SlowFastParams, m: f64) -> Result<UniformBounds> {
    bounds_with_eps0(params, m, default_eps0(params))
}

pub fn bounds_with_eps0(params: &SlowFastParams, m: f64, eps0: f64) -> Result<UniformBounds> {
    params.validate()?;
    if !(m.is_finite() && m >= 0.0) {
        return Err(Error::InvalidParameter(format!("flux cap must be >= 0, got {m}")));
    }
    let (_, neg_max_z) = refined_min(|p| -params.z(p), 0.0, 1.0, P_SAMPLES);
    let max_z = -neg_max_z;
    let n0 = params.d1 / params.b1_0;
    if !(eps0 > 0.0 && n0 < 1.0 / eps0 && max_z < 1.0 / eps0) {
        return Err(Error::InvalidParameter(format!(
            "eps0 = {eps0} violates d1/b1_0 < 1/eps0 and max Z = {max_z} < 1/eps0"
        )));
    }
    let n_plus = n0.max(max_z);

    // coarse grid over (eps, p), then alternate golden refinements
    let mut best = (0.0, 0.0, lower_root(params, m, 0.0, 0.0));
    for i in 0..EPS_SAMPLES {
        let eps = eps0 * i as f64 / (EPS_SAMPLES - 1) as f64;
        let (p, v) = refined_min(|p| lower_root(params, m, eps, p), 0.0, 1.0, P_SAMPLES);
        if v < best.2 {
            best = (eps, p, v);
        }
    }
    let d_eps = eps0 / (EPS_SAMPLES - 1) as f64;
    let (e, v) = golden_min(
        |e| lower_root(params, m, e, best.1),
        (best.0 - d_eps).max(0.0),
        (best.0 + d_eps).min(eps0),
        80,
    );
    if v < best.2 {
        best = (e, best.1, v);
    }
    let n_minus = n0.min(best.2);
    Ok(UniformBounds {
        n_minus,
        n_plus,
        eps0,
    })
}

/// Default step rule `min(0.0015, max(0.0004, eps/2))`.
pub fn default_time_step(eps: f64) -> f64 {
    (eps / 2.0).clamp(0.0004, 0.0015)
}

/// Integrates the slow-fast system from the wild equilibrium.
pub fn simulate(
    control: &ControlSignal,
    params: &SlowFastParams,
    opts: &NewtonOptions,
    keep_stages: bool,
) -> Result<Trajectory<2>> {
    simulate_from(params.initial_state(), control, params, opts, keep_stages)
}

pub fn simulate_from(
    x0: SlowFastState,
    control: &ControlSignal,
    params: &SlowFastParams,
    opts: &NewtonOptions,
    keep_stages: bool,
) -> Result<Trajectory<2>> {
    params.validate()?;
    params.check_state(&x0.as_array())?;
    integrate(params, x0.as_array(), control, opts, keep_stages)
}

/// Terminal cost of the final slow-fast state mapped back to `(n1, n2)`.
pub fn terminal_cost(state: SlowFastState, params: &SlowFastParams) -> f64 {
    objective_j(from_slowfast_unchecked(state, params.eps, params.k), &params.model_params())
}

/// `J^eps(u)`: slow-fast integration from the wild equilibrium, then the
/// least-squares terminal cost.
pub fn j_eps(control: &ControlSignal, params: &SlowFastParams, opts: &NewtonOptions) -> Result<f64> {
    let traj = simulate(control, params, opts, false)?;
    Ok(terminal_cost(SlowFastState::from(*traj.last()), params))
}

/// Maps every node of a slow-fast trajectory to `(n1, n2)`.
pub fn to_population_trajectory(traj: &Trajectory<2>, params: &SlowFastParams) -> Trajectory<2> {
    Trajectory {
        grid: traj.grid,
        states: traj
            .states
            .iter()
            .map(|s| from_slowfast_unchecked(SlowFastState::from(*s), params.eps, params.k).as_array())
            .collect(),
        stage_states: None,
    }
}
