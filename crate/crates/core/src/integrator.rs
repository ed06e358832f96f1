//! Two-stage Lobatto IIIC on uniform grids with piecewise-constant controls.
//!
//! Butcher arrays: `c = [0, 1]`, `A = [[1/2, -1/2], [1/2, 1/2]]`,
//! `b = [1/2, 1/2]`. The method is stiffly accurate (the second stage is the
//! step result) and L-stable, so the same grid can be used across the whole
//! range of the fast time scale.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, MAX_DIM};
use crate::output::fmt_f64;

const A: [[f64; 2]; 2] = [[0.5, -0.5], [0.5, 0.5]];

/// Uniform grid on `[0, horizon]` with `steps` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be > 0, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    /// Grid whose step is the closest to `dt` that divides `horizon` evenly.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter(format!("time step must be > 0, got {dt}")));
        }
        let steps = (horizon / dt).round().max(1.0) as usize;
        TimeGrid::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        if node == self.steps {
            self.horizon
        } else {
            node as f64 * self.dt()
        }
    }

    /// Node index closest to `t`, clamped to the grid.
    pub fn nearest_node(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.steps)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && self.horizon == other.horizon
    }
}

/// Piecewise-constant release rate; `values[k]` acts on `[k dt, (k+1) dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl ControlSignal {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.steps() {
            return Err(Error::GridMismatch(format!(
                "{} control values for a grid of {} steps",
                values.len(),
                grid.steps()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("control value {v} is not finite")));
        }
        Ok(ControlSignal { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        ControlSignal::constant(grid, 0.0)
    }

    pub fn constant(grid: TimeGrid, level: f64) -> Self {
        ControlSignal {
            grid,
            values: vec![level; grid.steps()],
        }
    }

    /// Samples `u` at cell midpoints.
    pub fn from_fn(grid: TimeGrid, u: impl Fn(f64) -> f64) -> Self {
        let dt = grid.dt();
        let values = (0..grid.steps()).map(|k| u((k as f64 + 0.5) * dt)).collect();
        ControlSignal { grid, values }
    }

    /// `level` on `[start, end]` with both ends snapped to the nearest node.
    pub fn block(grid: TimeGrid, start: f64, end: f64, level: f64) -> Self {
        let a = grid.nearest_node(start);
        let b = grid.nearest_node(end).max(a);
        let mut values = vec![0.0; grid.steps()];
        values[a..b].iter_mut().for_each(|v| *v = level);
        ControlSignal { grid, values }
    }

    /// Time integral `dt Σ u_k`.
    pub fn budget(&self) -> f64 {
        self.grid.dt() * self.values.iter().sum::<f64>()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `0 <= u <= m` and `dt Σ u <= c` with the given slack.
    pub fn is_feasible(&self, m: f64, c: f64, slack: f64) -> bool {
        self.min_value() >= -slack && self.max_value() <= m + slack && self.budget() <= c + slack
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", fmt_f64(self.grid.time(k)), fmt_f64(*v))?;
        }
        Ok(())
    }
}

/// States at every grid node; optional internal stages per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const D: usize> {
    pub grid: TimeGrid,
    pub states: Vec<[f64; D]>,
    pub stage_states: Option<Vec<[[f64; D]; 2]>>,
}

impl<const D: usize> Trajectory<D> {
    pub fn initial(&self) -> &[f64; D] {
        &self.states[0]
    }

    pub fn last(&self) -> &[f64; D] {
        self.states.last().expect("trajectory has at least one node")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=D).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{}", header.join(","))?;
        for (k, s) in self.states.iter().enumerate() {
            let cols: Vec<String> = s.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{},{}", fmt_f64(self.grid.time(k)), cols.join(","))?;
        }
        Ok(())
    }
}

/// Controlled right-hand side `x' = F(x, u, t)`.
pub trait OdeSystem<const D: usize> {
    fn rhs(&self, x: &[f64; D], u: f64, t: f64) -> [f64; D];

    /// `∂F/∂x`; central differences with `h = 1e-7 (1 + |x_j|)` unless overridden.
    fn jacobian(&self, x: &[f64; D], u: f64, t: f64) -> [[f64; D]; D] {
        let mut jac = [[0.0; D]; D];
        for j in 0..D {
            let h = 1e-7 * (1.0 + x[j].abs());
            let mut xp = *x;
            let mut xm = *x;
            xp[j] += h;
            xm[j] -= h;
            let fp = self.rhs(&xp, u, t);
            let fm = self.rhs(&xm, u, t);
            for i in 0..D {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// `∂F/∂u`.
    fn control_jacobian(&self, x: &[f64; D], u: f64, t: f64) -> [f64; D] {
        let h = 1e-7 * (1.0 + u.abs());
        let fp = self.rhs(x, u + h, t);
        let fm = self.rhs(x, u - h, t);
        let mut out = [0.0; D];
        for i in 0..D {
            out[i] = (fp[i] - fm[i]) / (2.0 * h);
        }
        out
    }

    /// Domain check applied to every accepted node.
    fn check_state(&self, _x: &[f64; D]) -> Result<()> {
        Ok(())
    }
}

/// Adapts a closure to [`OdeSystem`] with finite-difference Jacobians.
pub struct FnSystem<F>(pub F);

impl<const D: usize, F> OdeSystem<D> for FnSystem<F>
where
    F: Fn(&[f64; D], f64, f64) -> [f64; D],
{
    fn rhs(&self, x: &[f64; D], u: f64, t: f64) -> [f64; D] {
        (self.0)(x, u, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<const D: usize> {
    pub next: [f64; D],
    pub stages: [[f64; D]; 2],
    pub residual: f64,
    pub iterations: usize,
}

fn stage_residual<const D: usize, S: OdeSystem<D> + ?Sized>(
    sys: &S,
    x: &[f64; D],
    k: &[[f64; D]; 2],
    u: f64,
    t: f64,
    dt: f64,
) -> ([f64; MAX_DIM], f64) {
    let f = [sys.rhs(&k[0], u, t), sys.rhs(&k[1], u, t + dt)];
    let mut r = [0.0; MAX_DIM];
    let mut norm = 0.0f64;
    for i in 0..2 {
        for d in 0..D {
            let v = k[i][d] - x[d] - dt * (A[i][0] * f[0][d] + A[i][1] * f[1][d]);
            r[i * D + d] = v;
            norm = norm.max(v.abs());
        }
    }
    if !norm.is_finite() {
        norm = f64::INFINITY;
    }
    (r, norm)
}

/// `I - dt (A ⊗ I) diag(J(K_1), J(K_2))`.
fn stage_matrix<const D: usize>(jac: &[[[f64; D]; D]; 2], dt: f64) -> Mat {
    let mut m = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..2 {
        for j in 0..2 {
            for r in 0..D {
                for c in 0..D {
                    let id = if i == j && r == c { 1.0 } else { 0.0 };
                    m[i * D + r][j * D + c] = id - dt * A[i][j] * jac[j][r][c];
                }
            }
        }
    }
    m
}

/// One Lobatto IIIC step with the control frozen at `u` over `[t, t + dt]`.
pub fn lobatto_iiic_step<const D: usize, S: OdeSystem<D> + ?Sized>(
    sys: &S,
    x: &[f64; D],
    u: f64,
    t: f64,
    dt: f64,
    opts: &NewtonOptions,
) -> Result<StepOutcome<D>> {
    assert!(2 * D <= MAX_DIM, "state dimension {D} exceeds the stage solver size");
    let mut k = [*x, *x];
    let mut residual = f64::INFINITY;
    for iter in 0..=opts.max_iter {
        let (r, norm) = stage_residual(sys, x, &k, u, t, dt);
        residual = norm;
        if norm < opts.tol {
            return Ok(StepOutcome {
                next: k[1],
                stages: k,
                residual: norm,
                iterations: iter,
            });
        }
        if iter == opts.max_iter || !norm.is_finite() {
            break;
        }
        let jac = [sys.jacobian(&k[0], u, t), sys.jacobian(&k[1], u, t + dt)];
        let mut m = stage_matrix(&jac, dt);
        let mut delta = r;
        delta.iter_mut().for_each(|v| *v = -*v);
        if !linalg::solve_in_place(&mut m, &mut delta, 2 * D) {
            break;
        }
        for i in 0..2 {
            for d in 0..D {
                k[i][d] += delta[i * D + d];
            }
        }
    }
    Err(Error::NewtonDivergence {
        step: None,
        residual,
        iterations: opts.max_iter,
    })
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::NewtonDivergence { residual, iterations, .. } => Error::NewtonDivergence {
            step: Some(step),
            residual,
            iterations,
        },
        Error::PopulationCollapse { margin, .. } => Error::PopulationCollapse {
            step: Some(step),
            margin,
        },
        other => other,
    }
}

/// Runs `N_d` steps from `x0` under `control`.
pub fn integrate<const D: usize, S: OdeSystem<D> + ?Sized>(
    sys: &S,
    x0: [f64; D],
    control: &ControlSignal,
    opts: &NewtonOptions,
    keep_stages: bool,
) -> Result<Trajectory<D>> {
    let grid = control.grid;
    let dt = grid.dt();
    let n = grid.steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut stages = keep_stages.then(|| Vec::with_capacity(n));
    sys.check_state(&x0).map_err(|e| with_step(e, 0))?;
    states.push(x0);
    let mut x = x0;
    for (k, &u) in control.values.iter().enumerate() {
        let out = lobatto_iiic_step(sys, &x, u, grid.time(k), dt, opts).map_err(|e| with_step(e, k))?;
        sys.check_state(&out.next).map_err(|e| with_step(e, k + 1))?;
        if let Some(st) = stages.as_mut() {
            st.push(out.stages);
        }
        x = out.next;
        states.push(x);
    }
    Ok(Trajectory {
        grid,
        states,
        stage_states: stages,
    })
}

/// Exact gradient of a terminal cost through the discrete scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSensitivity<const D: usize> {
    /// `∂J/∂x_k` at every node.
    pub costates: Vec<[f64; D]>,
    /// `∂J/∂u_k` for every control cell.
    pub control_gradient: Vec<f64>,
}

/// Reverse sweep through the stage equations of [`integrate`].
///
/// `terminal` is `∂J/∂x_N`. The trajectory must carry its stage states.
pub fn discrete_adjoint<const D: usize, S: OdeSystem<D> + ?Sized>(
    sys: &S,
    traj: &Trajectory<D>,
    control: &ControlSignal,
    terminal: [f64; D],
) -> Result<DiscreteSensitivity<D>> {
    let stages = traj
        .stage_states
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("discrete adjoint needs stage states".into()))?;
    if !traj.grid.same_as(&control.grid) {
        return Err(Error::GridMismatch("trajectory and control grids differ".into()));
    }
    let grid = traj.grid;
    let dt = grid.dt();
    let n = grid.steps();
    let mut costates = vec![[0.0; D]; n + 1];
    let mut grad = vec![0.0; n];
    costates[n] = terminal;
    let mut lambda = terminal;
    for k in (0..n).rev() {
        let u = control.values[k];
        let t = grid.time(k);
        let st = &stages[k];
        let jac = [sys.jacobian(&st[0], u, t), sys.jacobian(&st[1], u, t + dt)];
        let fu = [
            sys.control_jacobian(&st[0], u, t),
            sys.control_jacobian(&st[1], u, t + dt),
        ];
        let m = stage_matrix(&jac, dt);
        let mut mt = linalg::transpose(&m, 2 * D);
        let mut mu = [0.0; MAX_DIM];
        mu[D..(D + D)].copy_from_slice(&lambda[..D]);
        if !linalg::solve_in_place(&mut mt, &mut mu, 2 * D) {
            return Err(Error::NewtonDivergence {
                step: Some(k),
                residual: f64::NAN,
                iterations: 0,
            });
        }
        let mut g = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for d in 0..D {
                    g += mu[i * D + d] * A[i][j] * fu[j][d];
                }
            }
        }
        grad[k] = dt * g;
        let mut next = [0.0; D];
        for d in 0..D {
            next[d] = mu[d] + mu[D + d];
        }
        lambda = next;
        costates[k] = lambda;
    }
    Ok(DiscreteSensitivity {
        costates,
        control_gradient: grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub order: f64,
}

/// Empirical order from final-time errors against a reference run at
/// `min(dt) / 4`; the control is sampled at cell midpoints of each grid.
pub fn convergence_order<const D: usize, S: OdeSystem<D> + ?Sized>(
    sys: &S,
    x0: [f64; D],
    horizon: f64,
    dts: &[f64],
    control: impl Fn(f64) -> f64,
    opts: &NewtonOptions,
) -> Result<ConvergenceStudy> {
    if dts.len() < 3 {
        return Err(Error::InvalidParameter("need at least three step sizes".into()));
    }
    let finest = dts.iter().copied().fold(f64::INFINITY, f64::min);
    let reference = {
        let grid = TimeGrid::with_step(horizon, finest / 4.0)?;
        let u = ControlSignal::from_fn(grid, &control);
        *integrate(sys, x0, &u, opts, false)?.last()
    };
    let mut used = Vec::with_capacity(dts.len());
    let mut errors = Vec::with_capacity(dts.len());
    for &dt in dts {
        let grid = TimeGrid::with_step(horizon, dt)?;
        let u = ControlSignal::from_fn(grid, &control);
        let end = *integrate(sys, x0, &u, opts, false)?.last();
        let err = end
            .iter()
            .zip(reference.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        used.push(grid.dt());
        errors.push(err);
    }
    let order = log_log_slope(&used, &errors);
    Ok(ConvergenceStudy {
        dts: used,
        errors,
        order,
    })
}

/// Least-squares slope of `ln(err)` against `ln(dt)`.
pub fn log_log_slope(dts: &[f64], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(lambda: f64) -> FnSystem<impl Fn(&[f64; 1], f64, f64) -> [f64; 1]> {
        FnSystem(move |x: &[f64; 1], _u: f64, _t: f64| [lambda * x[0]])
    }

    #[test]
    fn grid_basics() {
        let g = TimeGrid::new(10.0, 4).unwrap();
        assert_eq!(g.dt(), 2.5);
        assert_eq!(g.time(4), 10.0);
        assert_eq!(g.nearest_node(3.6), 1);
        assert_eq!(g.nearest_node(99.0), 4);
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert_eq!(TimeGrid::with_step(10.0, 0.0015).unwrap().steps(), 6667);
    }

    #[test]
    fn zero_rhs_preserves_state() {
        let sys = FnSystem(|_x: &[f64; 2], _u: f64, _t: f64| [0.0, 0.0]);
        let s = [0.3, -1.7];
        let out = lobatto_iiic_step(&sys, &s, 0.0, 0.0, 0.1, &NewtonOptions::default()).unwrap();
        assert_eq!(out.next, s);
    }

    #[test]
    fn linear_decay_single_step() {
        let sys = decay(-1.0);
        let out = lobatto_iiic_step(&sys, &[1.0], 0.0, 0.0, 0.1, &NewtonOptions::default()).unwrap();
        // stability function of 2-stage Lobatto IIIC: 1 / (1 - z + z^2/2)
        let z: f64 = -0.1;
        let expected = 1.0 / (1.0 - z + z * z / 2.0);
        assert!((out.next[0] - expected).abs() < 1e-14);
        assert!((out.next[0] - (-0.1f64).exp()).abs() < 1e-3);
        assert!(out.residual < 1e-12);
    }

    #[test]
    fn global_error_quarters_when_dt_halves() {
        let sys = decay(-1.0);
        let err = |n: usize| {
            let g = TimeGrid::new(1.0, n).unwrap();
            let tr = integrate(&sys, [1.0], &ControlSignal::zeros(g), &NewtonOptions::default(), false).unwrap();
            (tr.last()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(10) / err(20);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn stiff_relaxation_is_damped() {
        let eps = 1e-4;
        let sys = FnSystem(move |x: &[f64; 1], _u: f64, _t: f64| [-(x[0] - 1.0) / eps]);
        let opts = NewtonOptions::default();
        let out = lobatto_iiic_step(&sys, &[0.0], 0.0, 0.0, 0.01, &opts).unwrap();
        // one step leaves R(-100) = 1/5101 of the initial gap
        assert!((1.0 - out.next[0] - 1.0 / 5101.0).abs() < 1e-12, "{}", out.next[0]);
        let two = lobatto_iiic_step(&sys, &out.next, 0.0, 0.01, 0.01, &opts).unwrap();
        assert!((two.next[0] - 1.0).abs() < 1e-6, "{}", two.next[0]);
    }

    #[test]
    fn newton_failure_is_reported() {
        // x' = x^2 blows up inside the step for large x
        let sys = FnSystem(|x: &[f64; 1], _u: f64, _t: f64| [x[0] * x[0]]);
        let opts = NewtonOptions { tol: 1e-12, max_iter: 5 };
        let c = ControlSignal::zeros(TimeGrid::new(1.0, 1).unwrap());
        match integrate(&sys, [10.0], &c, &opts, false) {
            Err(Error::NewtonDivergence { step, .. }) => assert_eq!(step, Some(0)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn block_control_snaps_to_nodes() {
        let g = TimeGrid::new(10.0, 200).unwrap();
        let c = ControlSignal::block(g, 0.0, 0.09, 10.0);
        // 0.09 / 0.05 = 1.8 rounds to 2 cells
        assert_eq!(c.values.iter().filter(|v| **v == 10.0).count(), 2);
        assert!((c.budget() - 1.0).abs() < 1e-12);
        let late = ControlSignal::block(g, 9.94, 10.0, 10.0);
        assert_eq!(late.values.iter().filter(|v| **v == 10.0).count(), 1);
        assert_eq!(late.values[199], 10.0);
        assert!(ControlSignal::new(g, vec![0.0; 3]).is_err());
    }

    #[test]
    fn trajectory_csv_layout() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let tr = integrate(&decay(0.0), [2.0], &ControlSignal::zeros(g), &NewtonOptions::default(), false).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "1.0000000000000000e0,2.0000000000000000e0");
    }

    #[test]
    fn discrete_adjoint_matches_finite_differences() {
        // x' = -x + u x^2 / (1 + x^2), cost = x(T)^2 / 2
        let sys = FnSystem(|x: &[f64; 1], u: f64, _t: f64| [-x[0] + u * x[0] * x[0] / (1.0 + x[0] * x[0])]);
        let g = TimeGrid::new(2.0, 40).unwrap();
        let u = ControlSignal::from_fn(g, |t| 1.0 + 0.5 * t.sin());
        let opts = NewtonOptions::default();
        let cost = |c: &ControlSignal| {
            let tr = integrate(&sys, [0.8], c, &opts, false).unwrap();
            0.5 * tr.last()[0].powi(2)
        };
        let tr = integrate(&sys, [0.8], &u, &opts, true).unwrap();
        let sens = discrete_adjoint(&sys, &tr, &u, [tr.last()[0]]).unwrap();
        for k in [0, 7, 39] {
            let h = 1e-6;
            let mut up = u.clone();
            let mut um = u.clone();
            up.values[k] += h;
            um.values[k] -= h;
            let fd = (cost(&up) - cost(&um)) / (2.0 * h);
            let rel = (fd - sens.control_gradient[k]).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-6, "cell {k}: fd {fd} adjoint {}", sens.control_gradient[k]);
        }
    }
}
