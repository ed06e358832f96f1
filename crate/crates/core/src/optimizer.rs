//! Projected-gradient solver for the discretised release problems.
//!
//! The feasible set is `{0 <= u_k <= M, dt Σ u_k <= C}`. Each iteration moves
//! along the L² gradient (the per-cell derivative divided by `dt`, so the
//! step length does not depend on the mesh), projects back, and backtracks
//! until the Armijo condition holds. After the first iteration the trial step
//! is the Barzilai–Borwein length `<s, s> / <s, y>`, or, when the curvature
//! along the last step is not positive (the usual situation near bang-bang
//! optima), a fixed multiple of the last accepted step.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{gradient_full_on, gradient_reduced_on, GradientMethod, GradientSignal};
use crate::error::{Error, Result};
use crate::integrator::{integrate, ControlSignal, NewtonOptions, TimeGrid, Trajectory};
use crate::output::{fmt_f64, write_file};
use crate::reduced::{self, ReducedModel};
use crate::slowfast::{self, SlowFastParams, SlowFastState};

/// Box and budget constraints on a fixed grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibleSet {
    pub horizon: f64,
    pub c: f64,
    pub m: f64,
    pub grid: TimeGrid,
}

impl AdmissibleSet {
    pub fn new(grid: TimeGrid, c: f64, m: f64) -> Result<Self> {
        let mut bad = Vec::new();
        if !(c.is_finite() && c > 0.0) {
            bad.push(format!("budget C must be > 0, got {c}"));
        }
        if !(m.is_finite() && m > 0.0) {
            bad.push(format!("flux cap M must be > 0, got {m}"));
        }
        if !bad.is_empty() {
            return Err(Error::InvalidParameter(bad.join("; ")));
        }
        Ok(AdmissibleSet {
            horizon: grid.horizon(),
            c,
            m,
            grid,
        })
    }

    /// Largest usable budget, `min(C, T M)`.
    pub fn effective_budget(&self) -> f64 {
        self.c.min(self.horizon * self.m)
    }

    pub fn contains(&self, u: &ControlSignal, slack: f64) -> bool {
        u.grid.same_as(&self.grid) && u.is_feasible(self.m, self.c, slack)
    }
}

/// Euclidean projection onto the admissible set.
pub fn project(raw: &[f64], set: &AdmissibleSet) -> Result<ControlSignal> {
    if raw.len() != set.grid.steps() {
        return Err(Error::GridMismatch(format!(
            "{} values for a grid of {} steps",
            raw.len(),
            set.grid.steps()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection input"));
    }
    let dt = set.grid.dt();
    let m = set.m;
    let budget = |shift: f64| dt * raw.iter().map(|v| (v - shift).clamp(0.0, m)).sum::<f64>();
    let clipped = budget(0.0);
    if clipped <= set.c {
        return ControlSignal::new(set.grid, raw.iter().map(|v| v.clamp(0.0, m)).collect());
    }
    // budget(shift) is non-increasing and piecewise linear. Bisect, and at
    // every midpoint try the exact root for that midpoint's active set.
    let target = set.c / dt;
    let mut lo = 0.0;
    let mut hi = raw.iter().copied().fold(0.0, f64::max);
    let mut shift = hi;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (mut free_sum, mut free, mut sat) = (0.0, 0usize, 0usize);
        for &v in raw {
            let x = v - mid;
            if x >= m {
                sat += 1;
            } else if x > 0.0 {
                free_sum += v;
                free += 1;
            }
        }
        if free > 0 {
            let mut cand = (free_sum + m * sat as f64 - target) / free as f64;
            if cand >= lo && cand <= hi {
                // stay on the feasible side of rounding
                let mut nudge = f64::EPSILON * cand.abs().max(f64::MIN_POSITIVE);
                let mut b = budget(cand);
                for _ in 0..16 {
                    if b <= set.c {
                        break;
                    }
                    cand += nudge;
                    nudge *= 2.0;
                    b = budget(cand);
                }
                if b <= set.c && set.c - b <= 1e-12 * set.c {
                    shift = cand;
                    break;
                }
            }
        }
        if budget(mid) > set.c {
            lo = mid;
        } else {
            hi = mid;
            shift = hi;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    ControlSignal::new(set.grid, raw.iter().map(|v| (v - shift).clamp(0.0, m)).collect())
}

/// Cost and gradient oracle for [`optimize`]. The forward pass keeps
/// whatever the gradient needs so accepted trial points are not re-solved.
pub trait Objective: Sync {
    type Forward: Send;

    fn forward(&self, u: &ControlSignal) -> Result<(f64, Self::Forward)>;

    fn gradient(&self, u: &ControlSignal, forward: &Self::Forward) -> Result<GradientSignal>;

    fn cost(&self, u: &ControlSignal) -> Result<f64> {
        self.forward(u).map(|(c, _)| c)
    }

    fn cost_and_gradient(&self, u: &ControlSignal) -> Result<(f64, GradientSignal)> {
        let (c, f) = self.forward(u)?;
        Ok((c, self.gradient(u, &f)?))
    }
}

/// `J0` on the reduced model.
#[derive(Debug, Clone, Copy)]
pub struct ReducedProblem {
    pub model: ReducedModel,
    pub method: GradientMethod,
}

impl Objective for ReducedProblem {
    type Forward = Trajectory<1>;

    fn forward(&self, u: &ControlSignal) -> Result<(f64, Trajectory<1>)> {
        let keep = self.method == GradientMethod::Discrete;
        let traj = integrate(&self.model, [0.0], u, &NewtonOptions::default(), keep)?;
        Ok((reduced::terminal_cost(traj.last()[0], &self.model), traj))
    }

    fn gradient(&self, u: &ControlSignal, traj: &Trajectory<1>) -> Result<GradientSignal> {
        gradient_reduced_on(traj, u, &self.model, self.method)
    }
}

/// `J^eps` on the slow-fast system.
#[derive(Debug, Clone, Copy)]
pub struct FullProblem {
    pub params: SlowFastParams,
    pub method: GradientMethod,
    pub initial: SlowFastState,
}

impl FullProblem {
    /// Starts from the wild equilibrium.
    pub fn new(params: SlowFastParams, method: GradientMethod) -> Self {
        FullProblem {
            params,
            method,
            initial: params.initial_state(),
        }
    }
}

impl Objective for FullProblem {
    type Forward = Trajectory<2>;

    fn forward(&self, u: &ControlSignal) -> Result<(f64, Trajectory<2>)> {
        let keep = self.method == GradientMethod::Discrete;
        let traj = slowfast::simulate_from(self.initial, u, &self.params, &NewtonOptions::default(), keep)?;
        Ok((slowfast::terminal_cost(SlowFastState::from(*traj.last()), &self.params), traj))
    }

    fn gradient(&self, u: &ControlSignal, traj: &Trajectory<2>) -> Result<GradientSignal> {
        gradient_full_on(traj, u, &self.params, self.method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub initial_step: f64,
    pub backtrack: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Trial-step growth factor after a step with non-positive curvature.
    pub growth: f64,
    pub min_step: f64,
    pub max_step: f64,
    /// Stop once the cost fell by less than `stall_rtol |J|` over the last
    /// `stall_window` iterations; 0 disables the test.
    pub stall_window: usize,
    pub stall_rtol: f64,
    /// Wall-clock limit for one `optimize` call.
    pub time_limit: Option<Duration>,
    /// Run the starts on the rayon pool.
    pub parallel: bool,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            tol: 1e-8,
            max_iter: 5000,
            initial_step: 1.0,
            backtrack: 0.5,
            armijo: 1e-4,
            max_backtracks: 60,
            growth: 4.0,
            min_step: 1e-10,
            max_step: 1e8,
            stall_window: 100,
            stall_rtol: 1e-6,
            time_limit: None,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterReached,
    /// The line search found no decrease; the iterate is stationary to rounding.
    Stalled,
    /// Cost progress over the stall window fell below the relative threshold.
    Stagnated,
    /// The start raised a numerical error; see [`StartSummary::error`].
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartSummary {
    pub label: String,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub stop: StopReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimResult {
    #[serde(skip)]
    pub control: ControlSignal,
    pub cost: f64,
    pub cost_history: Vec<f64>,
    pub kkt_history: Vec<f64>,
    /// `‖u - P(u - ∇)‖∞` with the L² gradient.
    pub kkt_residual: f64,
    pub n_iterations: usize,
    pub stop: StopReason,
    pub converged: bool,
    pub start: String,
    pub starts: Vec<StartSummary>,
}

fn kkt(u: &ControlSignal, g_l2: &[f64], set: &AdmissibleSet) -> Result<f64> {
    let raw: Vec<f64> = u.values.iter().zip(g_l2).map(|(a, b)| a - b).collect();
    let p = project(&raw, set)?;
    Ok(u.values.iter().zip(&p.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

fn l2_gradient(g: &GradientSignal) -> Vec<f64> {
    let dt = g.grid.dt();
    g.values.iter().map(|v| v / dt).collect()
}

fn descend<O: Objective + ?Sized>(
    problem: &O,
    set: &AdmissibleSet,
    opts: &OptimOptions,
    init: &ControlSignal,
    deadline: Option<Instant>,
) -> Result<(ControlSignal, f64, Vec<f64>, Vec<f64>, StopReason)> {
    let dt = set.grid.dt();
    let mut u = project(&init.values, set)?;
    let (mut cost, g) = problem.cost_and_gradient(&u)?;
    let mut g = l2_gradient(&g);
    let mut res = kkt(&u, &g, set)?;
    let mut costs = vec![cost];
    let mut kkts = vec![res];
    let mut step = opts.initial_step;
    for _ in 0..opts.max_iter {
        if res < opts.tol {
            return Ok((u, cost, costs, kkts, StopReason::Converged));
        }
        if let Some(d) = deadline {
            if Instant::now() > d {
                return Err(Error::TimedOut(opts.time_limit.map_or(0.0, |t| t.as_secs_f64())));
            }
        }
        let mut s = step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let raw: Vec<f64> = u.values.iter().zip(&g).map(|(a, b)| a - s * b).collect();
            let trial = project(&raw, set)?;
            // discrete inner product <∂J/∂u, d> = dt <g_L2, d>
            let slope: f64 = dt * trial.values.iter().zip(&u.values).zip(&g).map(|((t, a), b)| (t - a) * b).sum::<f64>();
            if slope < 0.0 {
                let (c_new, fwd) = problem.forward(&trial)?;
                if c_new <= cost + opts.armijo * slope {
                    accepted = Some((trial, c_new, fwd));
                    break;
                }
            }
            s *= opts.backtrack;
        }
        let Some((u_new, c_new, fwd)) = accepted else {
            return Ok((u, cost, costs, kkts, StopReason::Stalled));
        };
        let g_new = l2_gradient(&problem.gradient(&u_new, &fwd)?);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..u.values.len() {
            let du = u_new.values[k] - u.values[k];
            ss += du * du;
            sy += du * (g_new[k] - g[k]);
        }
        // non-positive curvature along the step: let the trial length grow
        step = if sy > 0.0 { ss / sy } else { s * opts.growth };
        step = step.clamp(opts.min_step, opts.max_step);
        u = u_new;
        cost = c_new;
        g = g_new;
        res = kkt(&u, &g, set)?;
        costs.push(cost);
        kkts.push(res);
        let w = opts.stall_window;
        if w > 0 && costs.len() > w && costs[costs.len() - 1 - w] - cost <= opts.stall_rtol * cost.abs() && res >= opts.tol {
            return Ok((u, cost, costs, kkts, StopReason::Stagnated));
        }
    }
    let stop = if res < opts.tol { StopReason::Converged } else { StopReason::MaxIterReached };
    Ok((u, cost, costs, kkts, stop))
}

/// Best projected-gradient result over `inits`; ties go to the earlier start.
pub fn optimize<O: Objective + ?Sized>(
    problem: &O,
    set: &AdmissibleSet,
    opts: &OptimOptions,
    inits: &[(String, ControlSignal)],
) -> Result<OptimResult> {
    if inits.is_empty() {
        return Err(Error::InvalidParameter("optimize needs at least one starting control".into()));
    }
    let deadline = opts.time_limit.map(|t| Instant::now() + t);
    let run = |(_, init): &(String, ControlSignal)| descend(problem, set, opts, init, deadline);
    let runs: Vec<_> = if opts.parallel {
        inits.par_iter().map(run).collect()
    } else {
        inits.iter().map(run).collect()
    };
    let mut starts = Vec::with_capacity(inits.len());
    let mut best: Option<(usize, _)> = None;
    let mut first_err = None;
    for (i, r) in runs.into_iter().enumerate() {
        match r {
            Ok(out) => {
                starts.push(StartSummary {
                    label: inits[i].0.clone(),
                    cost: out.1,
                    kkt_residual: *out.3.last().unwrap(),
                    iterations: out.2.len() - 1,
                    stop: out.4,
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b): &(usize, (ControlSignal, f64, _, _, _))| out.1 < b.1) {
                    best = Some((i, out));
                }
            }
            Err(e) => {
                if matches!(e, Error::TimedOut(_)) {
                    return Err(e);
                }
                starts.push(StartSummary {
                    label: inits[i].0.clone(),
                    cost: f64::NAN,
                    kkt_residual: f64::NAN,
                    iterations: 0,
                    stop: StopReason::Failed,
                    error: Some(e.to_string()),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((i, (control, _, costs, kkts, stop))) = best else {
        return Err(first_err.expect("every start failed"));
    };
    let cost = problem.cost(&control)?;
    Ok(OptimResult {
        control,
        cost,
        n_iterations: costs.len() - 1,
        kkt_residual: *kkts.last().unwrap(),
        cost_history: costs,
        kkt_history: kkts,
        converged: matches!(stop, StopReason::Converged | StopReason::Stalled),
        stop,
        start: inits[i].0.clone(),
        starts,
    })
}

/// Labels accepted by [`named_init`]; `random_<k>` takes any `k`.
pub const INIT_LABELS: [&str; 5] = ["zero", "uniform", "all_m", "analytic", "random_<k>"];

/// One starting control by label: `zero`, `uniform` (`C/T`), `all_m`
/// (projected), `analytic` (projected copy of `analytic`), or `random_<k>`
/// (uniform on `[0, M]` from stream `k` of the seeded generator, projected).
pub fn named_init(label: &str, set: &AdmissibleSet, analytic: Option<&ControlSignal>, seed: u64) -> Result<ControlSignal> {
    let n = set.grid.steps();
    match label {
        "zero" => Ok(ControlSignal::zeros(set.grid)),
        "uniform" => Ok(ControlSignal::constant(set.grid, set.effective_budget() / set.horizon)),
        "all_m" => project(&vec![set.m; n], set),
        "analytic" => {
            let a = analytic.ok_or_else(|| Error::InvalidParameter("start `analytic` needs the reduced optimum".into()))?;
            if !a.grid.same_as(&set.grid) {
                return Err(Error::GridMismatch("analytic control is on another grid".into()));
            }
            project(&a.values, set)
        }
        _ => {
            let k: u64 = label
                .strip_prefix("random_")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| Error::InvalidParameter(format!("unknown start `{label}`")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..set.m)).collect();
            project(&raw, set)
        }
    }
}

/// Zero, uniform, all-`M`, the reduced optimum when given, and
/// `random_0` to `random_3`.
pub fn default_inits(set: &AdmissibleSet, analytic: Option<&ControlSignal>, seed: u64) -> Result<Vec<(String, ControlSignal)>> {
    let mut labels = vec!["zero", "uniform", "all_m"];
    if analytic.is_some() {
        labels.push("analytic");
    }
    labels.extend(["random_0", "random_1", "random_2", "random_3"]);
    labels
        .into_iter()
        .map(|l| Ok((l.to_string(), named_init(l, set, analytic, seed)?)))
        .collect()
}

/// `dt Σ |u1 - u2|`.
pub fn l1_distance(u1: &ControlSignal, u2: &ControlSignal) -> Result<f64> {
    if !u1.grid.same_as(&u2.grid) {
        return Err(Error::GridMismatch("controls live on different grids".into()));
    }
    Ok(u1.grid.dt() * u1.values.iter().zip(&u2.values).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Maximal runs of cells with `u >= M - kappa` and with `kappa <= u <= M - kappa`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructureReport {
    /// Inclusive cell ranges.
    pub saturated: Vec<(usize, usize)>,
    pub relaxed: Vec<(usize, usize)>,
    pub budget_used: f64,
    pub steps: usize,
    pub kappa: f64,
}

impl StructureReport {
    /// Every saturated run touches the first or the last cell. No saturated
    /// run at all counts as anchored (both end segments empty).
    pub fn boundary_anchored(&self) -> bool {
        self.saturated.iter().all(|&(a, b)| a == 0 || b + 1 == self.steps)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt = |runs: &[(usize, usize)]| {
            if runs.is_empty() {
                "none".to_string()
            } else {
                runs.iter().map(|(a, b)| format!("[{}, {}]", a + 1, b + 1)).collect::<Vec<_>>().join(" ")
            }
        };
        let _ = writeln!(s, "steps {}", self.steps);
        let _ = writeln!(s, "kappa {}", fmt_f64(self.kappa));
        let _ = writeln!(s, "I_M {}", fmt(&self.saturated));
        let _ = writeln!(s, "I_relax {}", fmt(&self.relaxed));
        let _ = writeln!(s, "budget_used {}", fmt_f64(self.budget_used));
        let _ = writeln!(s, "boundary_anchored {}", self.boundary_anchored());
        s
    }
}

fn runs(mask: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    let mut last = 0;
    for (k, on) in mask.enumerate() {
        match (on, open) {
            (true, None) => open = Some(k),
            (false, Some(a)) => {
                out.push((a, k - 1));
                open = None;
            }
            _ => {}
        }
        last = k;
    }
    if let Some(a) = open {
        out.push((a, last));
    }
    out
}

pub fn structure_report(control: &ControlSignal, m: f64, kappa: f64) -> Result<StructureReport> {
    if !(kappa > 0.0 && kappa < m / 2.0) {
        return Err(Error::InvalidParameter(format!("kappa must lie in (0, M/2), got {kappa}")));
    }
    Ok(StructureReport {
        saturated: runs(control.values.iter().map(|&u| u >= m - kappa)),
        relaxed: runs(control.values.iter().map(|&u| u >= kappa && u <= m - kappa)),
        budget_used: control.budget(),
        steps: control.grid.steps(),
        kappa,
    })
}

impl OptimResult {
    pub fn write_history_csv(&self) -> String {
        let mut s = String::from("iter,cost,kkt\n");
        for (i, (c, k)) in self.cost_history.iter().zip(&self.kkt_history).enumerate() {
            let _ = writeln!(s, "{i},{},{}", fmt_f64(*c), fmt_f64(*k));
        }
        s
    }

    /// `control.csv`, `history.csv` and `structure.txt`.
    pub fn write_files(&self, dir: &Path, set: &AdmissibleSet, kappa: f64) -> Result<()> {
        if !set.contains(&self.control, 1e-9) {
            return Err(Error::InvalidParameter("refusing to write an infeasible control".into()));
        }
        let mut control = Vec::new();
        self.control.write_csv(&mut control)?;
        write_file(dir, "control.csv", &control)?;
        write_file(dir, "history.csv", self.write_history_csv().as_bytes())?;
        let st = structure_report(&self.control, set.m, kappa)?;
        let mut text = st.to_text();
        let _ = writeln!(text, "cost {}", fmt_f64(self.cost));
        let _ = writeln!(text, "kkt_residual {}", fmt_f64(self.kkt_residual));
        let _ = writeln!(text, "iterations {}", self.n_iterations);
        let _ = writeln!(text, "stop {:?}", self.stop);
        let _ = writeln!(text, "start {}", self.start);
        write_file(dir, "structure.txt", text.as_bytes())
    }
}
