//! Costates, control gradients and switching-function diagnostics.
//!
//! Continuous adjoints are integrated backward with the same two-stage
//! Lobatto IIIC scheme as the state. Its stages sit on the grid nodes, so the
//! coefficient matrices only need the stored node states. The `*_discrete`
//! variants differentiate the discrete scheme itself and give the exact
//! gradient of the discretised cost.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{discrete_adjoint, integrate, ControlSignal, NewtonOptions, OdeSystem, TimeGrid, Trajectory};
use crate::linalg::{self, MAX_DIM};
use crate::model::{objective_j_gradient, PopulationState};
use crate::output::fmt_f64;
use crate::reduced::{self, ReducedModel};
use crate::slowfast::{self, SlowFastParams, SlowFastState};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory<const D: usize> {
    pub grid: TimeGrid,
    pub costates: Vec<[f64; D]>,
}

/// `values[k] = ∂J/∂u_k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSignal {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl GradientSignal {
    pub fn dot(&self, h: &[f64]) -> f64 {
        self.values.iter().zip(h).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Gradient from an exact or a continuous adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Continuous,
    #[default]
    Discrete,
}

/// One reversed-time Lobatto IIIC step of `y' = B(s) y`, where `b0` and `b1`
/// are `B` at the start and end of the reversed step.
fn linear_step<const D: usize>(y: &[f64; D], b0: &[[f64; D]; D], b1: &[[f64; D]; D], dt: f64) -> Result<[f64; D]> {
    const A: [[f64; 2]; 2] = [[0.5, -0.5], [0.5, 0.5]];
    let b = [b0, b1];
    let mut m = [[0.0; MAX_DIM]; MAX_DIM];
    let mut rhs = [0.0; MAX_DIM];
    for i in 0..2 {
        for r in 0..D {
            rhs[i * D + r] = y[r];
            for j in 0..2 {
                for c in 0..D {
                    let id = if i == j && r == c { 1.0 } else { 0.0 };
                    m[i * D + r][j * D + c] = id - dt * A[i][j] * b[j][r][c];
                }
            }
        }
    }
    if !linalg::solve_in_place(&mut m, &mut rhs, 2 * D) {
        return Err(Error::NewtonDivergence {
            step: None,
            residual: f64::NAN,
            iterations: 0,
        });
    }
    let mut out = [0.0; D];
    out.copy_from_slice(&rhs[D..2 * D]);
    Ok(out)
}

/// Backward sweep of `-q' = B(t) q` with `B` on cell `k` given by `coef(node, k)`.
fn backward_linear<const D: usize>(
    grid: TimeGrid,
    terminal: [f64; D],
    coef: impl Fn(usize, usize) -> [[f64; D]; D],
) -> Result<AdjointTrajectory<D>> {
    let n = grid.steps();
    let dt = grid.dt();
    let mut costates = vec![[0.0; D]; n + 1];
    costates[n] = terminal;
    for k in (0..n).rev() {
        let next = linear_step(&costates[k + 1], &coef(k + 1, k), &coef(k, k), dt).map_err(|e| match e {
            Error::NewtonDivergence { residual, iterations, .. } => Error::NewtonDivergence {
                step: Some(k),
                residual,
                iterations,
            },
            other => other,
        })?;
        costates[k] = next;
    }
    Ok(AdjointTrajectory { grid, costates })
}

fn check_grids(a: &TimeGrid, b: &TimeGrid) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch("trajectory and control grids differ".into()))
    }
}

/// `-q' = (f'(p) + u g'(p)) q`, `q(T) = -2 K² (1 - p(T))`.
pub fn adjoint_reduced(
    p_traj: &Trajectory<1>,
    control: &ControlSignal,
    model: &ReducedModel,
) -> Result<AdjointTrajectory<1>> {
    check_grids(&p_traj.grid, &control.grid)?;
    let k = model.params.k;
    let terminal = [-2.0 * k * k * (1.0 - p_traj.last()[0])];
    backward_linear(p_traj.grid, terminal, |node, cell| {
        let p = p_traj.states[node][0];
        [[model.f_prime(p) + control.values[cell] * model.g_prime(p)]]
    })
}

/// Per-cell trapezoid average of `q g(p)` times `dt`.
pub fn gradient_reduced(control: &ControlSignal, model: &ReducedModel) -> Result<GradientSignal> {
    Ok(cost_and_gradient_reduced(control, model, GradientMethod::Continuous)?.1)
}

pub fn gradient_reduced_discrete(control: &ControlSignal, model: &ReducedModel) -> Result<GradientSignal> {
    Ok(cost_and_gradient_reduced(control, model, GradientMethod::Discrete)?.1)
}

/// `J0(u)` and its gradient from a single forward solve.
pub fn cost_and_gradient_reduced(
    control: &ControlSignal,
    model: &ReducedModel,
    method: GradientMethod,
) -> Result<(f64, GradientSignal)> {
    let traj = integrate(model, [0.0], control, &NewtonOptions::default(), method == GradientMethod::Discrete)?;
    let cost = reduced::terminal_cost(traj.last()[0], model);
    Ok((cost, gradient_reduced_on(&traj, control, model, method)?))
}

/// Gradient along an existing frequency trajectory; the discrete method
/// needs the stage states.
pub fn gradient_reduced_on(
    traj: &Trajectory<1>,
    control: &ControlSignal,
    model: &ReducedModel,
    method: GradientMethod,
) -> Result<GradientSignal> {
    let p_final = traj.last()[0];
    let values = match method {
        GradientMethod::Continuous => {
            let adj = adjoint_reduced(traj, control, model)?;
            let w: Vec<f64> = adj
                .costates
                .iter()
                .zip(&traj.states)
                .map(|(q, p)| q[0] * model.g(p[0]))
                .collect();
            cell_average(&w, control.grid.dt())
        }
        GradientMethod::Discrete => {
            let k = model.params.k;
            discrete_adjoint(model, traj, control, [-2.0 * k * k * (1.0 - p_final)])?.control_gradient
        }
    };
    Ok(GradientSignal {
        grid: control.grid,
        values,
    })
}

fn cell_average(nodes: &[f64], dt: f64) -> Vec<f64> {
    nodes.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).collect()
}

/// `-q' = Jac(n)ᵀ q` on a `(n1, n2)` trajectory of the unscaled system with
/// `b_i = b_i⁰ / eps`; `q(T)` is the gradient of the terminal cost.
pub fn adjoint_full(
    traj: &Trajectory<2>,
    control: &ControlSignal,
    params: &SlowFastParams,
) -> Result<AdjointTrajectory<2>> {
    check_grids(&traj.grid, &control.grid)?;
    let mp = params.model_params();
    if let Some(s) = traj.states.iter().find(|s| s[0] + s[1] <= 0.0) {
        return Err(Error::ExtinctionState(*s));
    }
    let terminal = objective_j_gradient(PopulationState::from(*traj.last()), &mp);
    backward_linear(traj.grid, terminal, |node, cell| {
        let s = traj.states[node];
        let j = mp.jacobian(&s, control.values[cell], 0.0);
        [[j[0][0], j[1][0]], [j[0][1], j[1][1]]]
    })
}

pub fn gradient_full(control: &ControlSignal, params: &SlowFastParams) -> Result<GradientSignal> {
    Ok(cost_and_gradient_full(control, params, GradientMethod::Continuous)?.1)
}

pub fn gradient_full_discrete(control: &ControlSignal, params: &SlowFastParams) -> Result<GradientSignal> {
    Ok(cost_and_gradient_full(control, params, GradientMethod::Discrete)?.1)
}

/// `J^eps(u)` and its gradient; the state is always integrated in slow-fast variables.
pub fn cost_and_gradient_full(
    control: &ControlSignal,
    params: &SlowFastParams,
    method: GradientMethod,
) -> Result<(f64, GradientSignal)> {
    let traj = slowfast::simulate(control, params, &NewtonOptions::default(), method == GradientMethod::Discrete)?;
    let cost = slowfast::terminal_cost(SlowFastState::from(*traj.last()), params);
    Ok((cost, gradient_full_on(&traj, control, params, method)?))
}

/// Gradient along an existing slow-fast trajectory.
pub fn gradient_full_on(
    traj: &Trajectory<2>,
    control: &ControlSignal,
    params: &SlowFastParams,
    method: GradientMethod,
) -> Result<GradientSignal> {
    let values = match method {
        GradientMethod::Continuous => {
            let pop = slowfast::to_population_trajectory(traj, params);
            let adj = adjoint_full(&pop, control, params)?;
            let q2: Vec<f64> = adj.costates.iter().map(|q| q[1]).collect();
            cell_average(&q2, control.grid.dt())
        }
        GradientMethod::Discrete => {
            let last = SlowFastState::from(*traj.last());
            discrete_adjoint(params, traj, control, params.terminal_cost_gradient(last))?.control_gradient
        }
    };
    Ok(GradientSignal {
        grid: control.grid,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingReport {
    pub times: Vec<f64>,
    pub controls: Vec<f64>,
    /// Per-cell switching function.
    pub w: Vec<f64>,
    pub lambda_estimate: f64,
    pub violation_count: usize,
    pub saturated: Vec<usize>,
    pub off: Vec<usize>,
    pub interior: Vec<usize>,
    /// `-f(p*)/g(p*)`, the only possible interior optimal level (reduced problem only).
    pub singular_value: Option<f64>,
}

impl SwitchingReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u,w,lambda_est")?;
        let lam = fmt_f64(self.lambda_estimate);
        for ((t, u), s) in self.times.iter().zip(&self.controls).zip(&self.w) {
            writeln!(w, "{},{},{},{}", fmt_f64(*t), fmt_f64(*u), fmt_f64(*s), lam)?;
        }
        Ok(())
    }
}

/// First-order test of a control against a per-cell switching function `w`.
///
/// Cells are classified with threshold `kappa`: `u >= m - kappa` is
/// saturated, `u <= kappa` is off, the rest interior. `Λ` is the mean of `w`
/// over interior cells when there are any, otherwise the midpoint between the
/// largest saturated and the smallest off value. A cell violates the
/// conditions when `w > Λ` on a saturated cell, `w < Λ` on an off cell, or
/// `w != Λ` on an interior cell, each up to `1e-6 |Λ|`.
pub fn switching_from_kernel(control: &ControlSignal, w: Vec<f64>, m: f64, kappa: f64) -> SwitchingReport {
    let mut saturated = Vec::new();
    let mut off = Vec::new();
    let mut interior = Vec::new();
    for (k, &u) in control.values.iter().enumerate() {
        if u >= m - kappa {
            saturated.push(k);
        } else if u <= kappa {
            off.push(k);
        } else {
            interior.push(k);
        }
    }
    let max_on = saturated.iter().map(|&k| w[k]).fold(f64::NEG_INFINITY, f64::max);
    let min_off = off.iter().map(|&k| w[k]).fold(f64::INFINITY, f64::min);
    let lambda = if !interior.is_empty() {
        interior.iter().map(|&k| w[k]).sum::<f64>() / interior.len() as f64
    } else if saturated.is_empty() {
        min_off
    } else if off.is_empty() {
        max_on
    } else {
        0.5 * (max_on + min_off)
    };
    let tol = 1e-6 * lambda.abs();
    let violation_count = saturated.iter().filter(|&&k| w[k] > lambda + tol).count()
        + off.iter().filter(|&&k| w[k] < lambda - tol).count()
        + interior.iter().filter(|&&k| (w[k] - lambda).abs() > tol).count();
    SwitchingReport {
        times: (0..control.grid.steps()).map(|k| control.grid.time(k)).collect(),
        controls: control.values.clone(),
        w,
        lambda_estimate: lambda,
        violation_count,
        saturated,
        off,
        interior,
        singular_value: None,
    }
}

/// Switching analysis for the reduced problem with `w = q g(p)`.
pub fn switching_analysis(control: &ControlSignal, model: &ReducedModel, m: f64, kappa: f64) -> Result<SwitchingReport> {
    switching_analysis_with(control, model, m, kappa, GradientMethod::Continuous)
}

/// As [`switching_analysis`], with `w` taken from the chosen gradient. The
/// discrete kernel is the exact first-order condition of the discretised
/// problem, so it is the one to certify an optimizer result against.
pub fn switching_analysis_with(
    control: &ControlSignal,
    model: &ReducedModel,
    m: f64,
    kappa: f64,
    method: GradientMethod,
) -> Result<SwitchingReport> {
    let g = cost_and_gradient_reduced(control, model, method)?.1;
    let dt = control.grid.dt();
    let w = g.values.iter().map(|v| v / dt).collect();
    let mut rep = switching_from_kernel(control, w, m, kappa);
    rep.singular_value = Some(model.max_neg_fg);
    Ok(rep)
}

/// Switching analysis for the slow-fast problem with `w = q2`.
pub fn switching_analysis_full(control: &ControlSignal, params: &SlowFastParams, m: f64, kappa: f64) -> Result<SwitchingReport> {
    let g = gradient_full(control, params)?;
    let dt = control.grid.dt();
    let w = g.values.iter().map(|v| v / dt).collect();
    Ok(switching_from_kernel(control, w, m, kappa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduced::{j0, simulate_reduced, solve_reduced_analytic};

    fn grid() -> TimeGrid {
        TimeGrid::new(10.0, 2000).unwrap()
    }

    #[test]
    fn reduced_adjoint_along_zero_state() {
        let r = ReducedModel::table1();
        let u = ControlSignal::zeros(grid());
        let traj = simulate_reduced(&u, &r, &NewtonOptions::default()).unwrap();
        let adj = adjoint_reduced(&traj, &u, &r).unwrap();
        let rate = r.f_prime(0.0);
        for (i, q) in adj.costates.iter().enumerate() {
            let t = grid().time(i);
            let exact = -2.0 * (rate * (10.0 - t)).exp();
            assert!(q[0] < 0.0);
            assert!((q[0] - exact).abs() < 1e-6, "{t}: {} vs {exact}", q[0]);
        }
    }

    #[test]
    fn reduced_gradient_is_nonpositive() {
        let r = ReducedModel::table1();
        let u = ControlSignal::block(grid(), 2.0, 2.05, 10.0);
        let g = gradient_reduced(&u, &r).unwrap();
        assert!(g.values.iter().all(|v| *v <= 1e-12));
    }

    fn fd_check(cost: impl Fn(&ControlSignal) -> f64, grad: &GradientSignal, u: &ControlSignal, h: &[f64]) -> f64 {
        let d = 1e-6;
        let shift = |s: f64| {
            let v = u.values.iter().zip(h).map(|(a, b)| a + s * b).collect();
            ControlSignal::new(u.grid, v).unwrap()
        };
        let fd = (cost(&shift(d)) - cost(&shift(-d))) / (2.0 * d);
        let an = grad.dot(h);
        (an - fd).abs() / an.abs().max(1e-12)
    }

    #[test]
    fn reduced_discrete_gradient_is_exact() {
        let r = ReducedModel::table1();
        let u = ControlSignal::from_fn(grid(), |t| 0.05 * (1.0 + (t).sin()));
        let h: Vec<f64> = (0..grid().steps()).map(|k| ((k * 7919) % 13) as f64 / 13.0).collect();
        let g = gradient_reduced_discrete(&u, &r).unwrap();
        assert!(fd_check(|c| j0(c, &r).unwrap(), &g, &u, &h) < 1e-6);
        let gc = gradient_reduced(&u, &r).unwrap();
        assert!(fd_check(|c| j0(c, &r).unwrap(), &gc, &u, &h) < 1e-4);
    }

    #[test]
    fn full_gradients_match_differences() {
        let p = SlowFastParams::table1(1.0);
        let u = ControlSignal::from_fn(grid(), |t| 0.04 * (1.0 + (0.7 * t).cos()));
        let h: Vec<f64> = (0..grid().steps()).map(|k| ((k * 104729) % 17) as f64 / 17.0).collect();
        let cost = |c: &ControlSignal| slowfast::j_eps(c, &p, &NewtonOptions::default()).unwrap();
        let gd = gradient_full_discrete(&u, &p).unwrap();
        assert!(fd_check(cost, &gd, &u, &h) < 1e-6);
        let gc = gradient_full(&u, &p).unwrap();
        assert!(fd_check(cost, &gc, &u, &h) < 1e-4);
    }

    #[test]
    fn full_zero_control_gradient_negative() {
        let p = SlowFastParams::table1(1.0);
        let g = gradient_full(&ControlSignal::zeros(grid()), &p).unwrap();
        assert!(g.values.iter().all(|v| *v < 0.0));
    }

    #[test]
    fn full_adjoint_is_linear_in_terminal_data() {
        let p = SlowFastParams::table1(1.0);
        let u = ControlSignal::block(grid(), 0.0, 0.04, 10.0);
        let traj = slowfast::simulate(&u, &p, &NewtonOptions::default(), false).unwrap();
        let pop = slowfast::to_population_trajectory(&traj, &p);
        let a = adjoint_full(&pop, &u, &p).unwrap();
        let b = backward_linear(pop.grid, [2.0 * a.costates.last().unwrap()[0], 2.0 * a.costates.last().unwrap()[1]], |node, cell| {
            let s = pop.states[node];
            let j = p.model_params().jacobian(&s, u.values[cell], 0.0);
            [[j[0][0], j[1][0]], [j[0][1], j[1][1]]]
        })
        .unwrap();
        for (x, y) in a.costates.iter().zip(&b.costates) {
            assert!((2.0 * x[0] - y[0]).abs() <= 1e-12 * y[0].abs().max(1.0));
            assert!((2.0 * x[1] - y[1]).abs() <= 1e-12 * y[1].abs().max(1.0));
        }
    }

    #[test]
    fn switching_on_analytic_and_constant_controls() {
        let r = ReducedModel::table1();
        let sol = solve_reduced_analytic(grid(), 0.75, 10.0, &r).unwrap();
        let rep = switching_analysis(&sol.control, &r, 10.0, 1e-2).unwrap();
        assert_eq!(rep.violation_count, 0);
        assert!(rep.lambda_estimate < 0.0);
        let on = rep.saturated.iter().map(|&k| rep.w[k]).fold(f64::NEG_INFINITY, f64::max);
        let off = rep.off.iter().map(|&k| rep.w[k]).fold(f64::INFINITY, f64::min);
        assert!(on < off);

        let flat = ControlSignal::constant(grid(), 0.075);
        let rep = switching_analysis(&flat, &r, 10.0, 1e-2).unwrap();
        assert!(rep.violation_count > 0);
    }

    #[test]
    fn switching_csv_layout() {
        let r = ReducedModel::table1();
        let g = TimeGrid::new(1.0, 2).unwrap();
        let rep = switching_analysis(&ControlSignal::constant(g, 10.0), &r, 10.0, 1e-2).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("t,u,w,lambda_est\n0.0000000000000000e0,1.0000000000000000e1,"));
    }
}
