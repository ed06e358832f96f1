//! Scalar limit of the slow-fast system: the infected frequency obeys
//! `dp/dt = f(p) + u g(p)` with a bistable `f`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{integrate, ControlSignal, NewtonOptions, OdeSystem, TimeGrid, Trajectory};
use crate::quadrature;
use crate::slowfast::SlowFastParams;

/// Absolute quadrature tolerance for `G_M`.
pub const G_M_TOL: f64 = 1e-10;
/// Absolute quadrature tolerance for `C*(M)`.
pub const C_STAR_TOL: f64 = 1e-8;
/// `|C - C*| <= TIE_TOL` is treated as the threshold case.
pub const TIE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReducedModel {
    /// `eps` is not used by the reduced model.
    pub params: SlowFastParams,
    pub theta: f64,
    pub xi: f64,
    pub p_star: f64,
    pub max_neg_fg: f64,
}

/// `xi = d1 b2⁰ / (d2 b1⁰)`.
pub fn xi_of(params: &SlowFastParams) -> f64 {
    params.d1 * params.b2_0 / (params.d2 * params.b1_0)
}

/// Interior critical point of `f/g`, absent unless `xi < 1`.
pub fn singular_frequency(params: &SlowFastParams) -> Option<f64> {
    let xi = xi_of(params);
    (xi < 1.0 && params.s_h > 0.0).then(|| (1.0 - xi.sqrt()) / params.s_h)
}

impl ReducedModel {
    pub fn new(params: SlowFastParams) -> Result<Self> {
        params.validate()?;
        let xi = xi_of(&params);
        let lower = 1.0 - params.s_h;
        if !(lower < xi && xi < 1.0) {
            return Err(Error::NoCoexistence { xi, lower });
        }
        let theta = (1.0 - xi) / params.s_h;
        let p_star = (1.0 - xi.sqrt()) / params.s_h;
        let max_neg_fg = params.k * params.d2 * (p_star - xi * p_star / (1.0 - params.s_h * p_star));
        Ok(ReducedModel {
            params,
            theta,
            xi,
            p_star,
            max_neg_fg,
        })
    }

    pub fn table1() -> Self {
        Self::new(SlowFastParams::table1(1.0)).expect("reference parameters satisfy coexistence")
    }

    /// `d1 b2⁰ - d2 b1⁰ (1 - s_h p)`
    #[inline]
    fn h(&self, p: f64) -> f64 {
        let q = &self.params;
        q.d1 * q.b2_0 - q.d2 * q.b1_0 * (1.0 - q.s_h * p)
    }

    #[inline]
    pub fn f(&self, p: f64) -> f64 {
        p * (1.0 - p) * self.h(p) / self.params.a(p)
    }

    #[inline]
    pub fn g(&self, p: f64) -> f64 {
        let q = &self.params;
        q.b1_0 * (1.0 - p) * (1.0 - q.s_h * p) / (q.k * q.a(p))
    }

    #[inline]
    fn a_prime(&self, p: f64) -> f64 {
        let q = &self.params;
        q.b1_0 * (2.0 * q.s_h * p - 1.0 - q.s_h) + q.b2_0
    }

    pub fn f_prime(&self, p: f64) -> f64 {
        let q = &self.params;
        let a = q.a(p);
        let num = p * (1.0 - p) * self.h(p);
        let dnum = (1.0 - 2.0 * p) * self.h(p) + p * (1.0 - p) * q.d2 * q.b1_0 * q.s_h;
        (dnum * a - num * self.a_prime(p)) / (a * a)
    }

    pub fn g_prime(&self, p: f64) -> f64 {
        let q = &self.params;
        let a = q.a(p);
        let m = (1.0 - p) * (1.0 - q.s_h * p);
        let dm = 2.0 * q.s_h * p - 1.0 - q.s_h;
        q.b1_0 * (dm * a - m * self.a_prime(p)) / (q.k * a * a)
    }

    /// `(theta, xi, p_star, max_neg_fg)`.
    pub fn derived_constants(&self) -> (f64, f64, f64, f64) {
        (self.theta, self.xi, self.p_star, self.max_neg_fg)
    }

    /// Threshold-case cost `K² (1 - theta)²`.
    pub fn threshold_cost(&self) -> f64 {
        let k = self.params.k;
        k * k * (1.0 - self.theta).powi(2)
    }
}

impl OdeSystem<1> for ReducedModel {
    fn rhs(&self, x: &[f64; 1], u: f64, _t: f64) -> [f64; 1] {
        [self.f(x[0]) + u * self.g(x[0])]
    }

    fn jacobian(&self, x: &[f64; 1], u: f64, _t: f64) -> [[f64; 1]; 1] {
        [[self.f_prime(x[0]) + u * self.g_prime(x[0])]]
    }

    fn control_jacobian(&self, x: &[f64; 1], _u: f64, _t: f64) -> [f64; 1] {
        [self.g(x[0])]
    }
}

pub fn f_of_p(p: f64, model: &ReducedModel) -> f64 {
    model.f(p)
}

pub fn g_of_p(p: f64, model: &ReducedModel) -> f64 {
    model.g(p)
}

pub fn derived_constants(params: &SlowFastParams) -> Result<(f64, f64, f64, f64)> {
    ReducedModel::new(*params).map(|m| m.derived_constants())
}

/// Time for `u = M` to carry the frequency from 0 to `p`.
pub fn g_m(p: f64, m: f64, model: &ReducedModel) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("G_M needs p in [0, 1), got {p}")));
    }
    // -f/g increases up to p* and decreases after, so the worst point on [0, p] is min(p, p*)
    let worst = p.min(model.p_star);
    let speed = model.f(worst) + m * model.g(worst);
    if speed <= 0.0 || worst > 0.0 && m <= -model.f(worst) / model.g(worst) {
        return Err(Error::NonPositiveSpeed { p: worst, value: speed });
    }
    Ok(quadrature::integrate(|q| 1.0 / (model.f(q) + m * model.g(q)), 0.0, p, G_M_TOL)?.value)
}

/// Budget needed at full flux `M` to reach `theta` from 0.
pub fn c_star(m: f64, model: &ReducedModel) -> Result<f64> {
    if !(m > model.max_neg_fg) {
        return Err(Error::InsufficientFlux {
            m,
            max_neg_fg: model.max_neg_fg,
        });
    }
    Ok(quadrature::integrate(|q| m / (model.f(q) + m * model.g(q)), 0.0, model.theta, C_STAR_TOL)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseCase {
    LateRelease,
    EarlyRelease,
    Continuum,
}

impl ReleaseCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReleaseCase::LateRelease => "late_release",
            ReleaseCase::EarlyRelease => "early_release",
            ReleaseCase::Continuum => "continuum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticSolution {
    pub case: ReleaseCase,
    /// Symbolic release interval `[start, end]` at level `level`.
    pub start: f64,
    pub end: f64,
    pub level: f64,
    #[serde(skip)]
    pub control: ControlSignal,
    /// `J0` of the discretised control.
    pub predicted_cost: f64,
    /// Admissible shifts in the threshold case.
    pub lambda_range: Option<(f64, f64)>,
    /// `None` when `M <= max_neg_fg`.
    pub c_star: Option<f64>,
    /// `budget(control) - C`, caused by snapping the interval to grid nodes.
    pub snapping_error: f64,
    /// Whether `predicted_cost` sits on the expected side of `K²(1-theta)²`.
    pub inequality_holds: bool,
}

/// Closed-form optimum of the reduced problem on `grid`.
pub fn solve_reduced_analytic(grid: TimeGrid, c: f64, m: f64, model: &ReducedModel) -> Result<AnalyticSolution> {
    let horizon = grid.horizon();
    if !(c.is_finite() && c > 0.0 && m.is_finite() && m > 0.0) {
        return Err(Error::InvalidParameter(format!("need C > 0 and M > 0, got C = {c}, M = {m}")));
    }
    let duration = c / m;
    if horizon <= duration {
        return Err(Error::HorizonTooShort {
            horizon,
            release_time: duration,
        });
    }
    let cs = if m <= model.max_neg_fg { None } else { Some(c_star(m, model)?) };
    let case = match cs {
        None => ReleaseCase::LateRelease,
        Some(cs) if (c - cs).abs() <= TIE_TOL => ReleaseCase::Continuum,
        Some(cs) if c < cs => ReleaseCase::LateRelease,
        Some(_) => ReleaseCase::EarlyRelease,
    };
    let (start, end) = match case {
        ReleaseCase::LateRelease => (horizon - duration, horizon),
        ReleaseCase::EarlyRelease | ReleaseCase::Continuum => (0.0, duration),
    };
    let control = ControlSignal::block(grid, start, end, m);
    let predicted_cost = j0(&control, model)?;
    let bar = model.threshold_cost();
    let inequality_holds = match case {
        ReleaseCase::LateRelease => predicted_cost > bar,
        ReleaseCase::EarlyRelease => predicted_cost < bar,
        ReleaseCase::Continuum => (predicted_cost - bar).abs() < 1e-6,
    };
    Ok(AnalyticSolution {
        case,
        start,
        end,
        level: m,
        snapping_error: control.budget() - c,
        control,
        predicted_cost,
        lambda_range: (case == ReleaseCase::Continuum).then_some((0.0, horizon - duration)),
        c_star: cs,
        inequality_holds,
    })
}

/// Frequency trajectory from `p(0) = 0`.
pub fn simulate_reduced(control: &ControlSignal, model: &ReducedModel, opts: &NewtonOptions) -> Result<Trajectory<1>> {
    integrate(model, [0.0], control, opts, false)
}

/// `K² (1 - p(T))²`.
pub fn terminal_cost(p_final: f64, model: &ReducedModel) -> f64 {
    let k = model.params.k;
    k * k * (1.0 - p_final).powi(2)
}

pub fn j0(control: &ControlSignal, model: &ReducedModel) -> Result<f64> {
    let traj = simulate_reduced(control, model, &NewtonOptions::default())?;
    Ok(terminal_cost(traj.last()[0], model))
}

/// Final frequency of every single block `M·1[k dt, k dt + C/M]` with `C/M`
/// a whole number of cells; index `k` is the start cell.
pub fn single_block_scan(grid: TimeGrid, c: f64, m: f64, model: &ReducedModel) -> Result<Vec<f64>> {
    let cells = (c / (m * grid.dt())).round() as usize;
    if cells == 0 || cells > grid.steps() {
        return Err(Error::InvalidParameter(format!(
            "budget {c} at level {m} spans {cells} cells on a {}-cell grid",
            grid.steps()
        )));
    }
    (0..=grid.steps() - cells)
        .map(|k| {
            let mut v = vec![0.0; grid.steps()];
            v[k..k + cells].iter_mut().for_each(|x| *x = m);
            let u = ControlSignal::new(grid, v)?;
            Ok(simulate_reduced(&u, model, &NewtonOptions::default())?.last()[0])
        })
        .collect()
}
