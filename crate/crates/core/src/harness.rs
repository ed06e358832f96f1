//! Batch experiments behind the `wolbachia` binary.
//!
//! Every command takes a validated [`RunConfig`] and an output directory,
//! writes its files there together with the resolved `config.json`, and
//! returns a serialisable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{gradient_full_on, switching_from_kernel, GradientMethod, SwitchingReport};
use crate::error::{Error, Result};
use crate::integrator::{integrate, ControlSignal, NewtonOptions, TimeGrid, Trajectory};
use crate::model::{self, ModelParams, PopulationState, Stability};
use crate::optimizer::{
    l1_distance, named_init, optimize, structure_report, AdmissibleSet, FullProblem, OptimOptions, OptimResult,
    StopReason, StructureReport,
};
use crate::output::{fmt_f64, write_file};
use crate::reduced::{self, AnalyticSolution, ReducedModel};
use crate::slowfast::{self, SlowFastParams, SlowFastState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Stop when `sup |u - P(u - grad)| < tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub stall_window: usize,
    pub stall_rtol: f64,
    pub gradient: GradientMethod,
    /// Starting controls, see [`crate::optimizer::named_init`].
    pub starts: Vec<String>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimOptions::default();
        OptimizerConfig {
            tol: o.tol,
            max_iter: o.max_iter,
            stall_window: o.stall_window,
            stall_rtol: o.stall_rtol,
            gradient: GradientMethod::Discrete,
            starts: ["analytic", "uniform", "zero", "random_0"].map(String::from).to_vec(),
        }
    }
}

/// Everything a run needs. Missing JSON fields take the reference values
/// (`b1⁰ = 1, b2⁰ = 0.9, d1 = 0.27, d2 = 0.3, s_h = 0.9, K = 1, T = 10, M = 10`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub b1_0: f64,
    pub b2_0: f64,
    pub d1: f64,
    pub d2: f64,
    pub s_h: f64,
    pub k: f64,
    pub horizon: f64,
    /// `None`: `min(0.0015, max(0.0004, eps/2))` for each `eps`.
    pub dt: Option<f64>,
    pub c_budget: f64,
    pub m: f64,
    pub eps: f64,
    /// Descending.
    pub eps_list: Vec<f64>,
    pub c_list: Vec<f64>,
    /// `(n1, n2)` for `simulate`; `None` is the wild equilibrium. The
    /// optimisation commands always start from the wild equilibrium.
    pub initial_state: Option<[f64; 2]>,
    /// Structure threshold; `None` is `1e-3 M`.
    pub kappa: Option<f64>,
    pub seed: u64,
    /// Worker threads for sweeps; 0 uses every core.
    pub jobs: usize,
    pub cell_time_limit_s: f64,
    pub output_dir: PathBuf,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            b1_0: 1.0,
            b2_0: 0.9,
            d1: 0.27,
            d2: 0.3,
            s_h: 0.9,
            k: 1.0,
            horizon: 10.0,
            dt: None,
            c_budget: 0.75,
            m: 10.0,
            eps: 1.0,
            eps_list: vec![1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 0.002, 0.001, 0.0005],
            c_list: (0..13).map(|i| (15 + 5 * i) as f64 / 100.0).collect(),
            initial_state: None,
            kappa: None,
            seed: 7,
            jobs: 0,
            cell_time_limit_s: 120.0,
            output_dir: PathBuf::from("out"),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Command-line values that replace config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// First entry sets `eps`, all of them `eps_list`.
    pub eps: Option<Vec<f64>>,
    /// First entry sets `c_budget`, all of them `c_list`.
    pub c_budget: Option<Vec<f64>>,
    pub dt: Option<f64>,
    pub kappa: Option<f64>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a JSON file; syntax errors come back as [`Error::InvalidConfig`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(vec![format!("cannot read {}: {e}", path.display())]))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", path.display())]))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(e) = o.eps.as_ref().filter(|e| !e.is_empty()) {
            self.eps = e[0];
            self.eps_list = e.clone();
        }
        if let Some(c) = o.c_budget.as_ref().filter(|c| !c.is_empty()) {
            self.c_budget = c[0];
            self.c_list = c.clone();
        }
        if o.dt.is_some() {
            self.dt = o.dt;
        }
        if o.kappa.is_some() {
            self.kappa = o.kappa;
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    pub fn slowfast_params(&self, eps: f64) -> SlowFastParams {
        SlowFastParams {
            b1_0: self.b1_0,
            b2_0: self.b2_0,
            d1: self.d1,
            d2: self.d2,
            s_h: self.s_h,
            k: self.k,
            eps,
        }
    }

    pub fn reduced_model(&self) -> Result<ReducedModel> {
        ReducedModel::new(self.slowfast_params(1.0))
    }

    pub fn time_step(&self, eps: f64) -> f64 {
        self.dt.unwrap_or_else(|| slowfast::default_time_step(eps))
    }

    pub fn grid(&self, eps: f64) -> Result<TimeGrid> {
        TimeGrid::with_step(self.horizon, self.time_step(eps))
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or(1e-3 * self.m)
    }

    pub fn optim_options(&self) -> OptimOptions {
        OptimOptions {
            tol: self.optimizer.tol,
            max_iter: self.optimizer.max_iter,
            stall_window: self.optimizer.stall_window,
            stall_rtol: self.optimizer.stall_rtol,
            ..OptimOptions::default()
        }
    }

    /// Every violated condition; empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut eps_values = vec![self.eps];
        eps_values.extend(&self.eps_list);
        for (i, e) in eps_values.iter().enumerate() {
            let what = if i == 0 { "eps".to_string() } else { format!("eps_list[{}]", i - 1) };
            if !(e.is_finite() && *e > 0.0) {
                out.push(format!("{what} must be finite and > 0 (got {e})"));
            }
        }
        out.extend(self.slowfast_params(1.0).violations().into_iter().filter(|v| !v.starts_with("eps")));
        if self.eps_list.is_empty() {
            out.push("eps_list must not be empty".into());
        }
        if self.eps_list.windows(2).any(|w| w[1] >= w[0]) {
            out.push("eps_list must be strictly descending".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            out.push(format!("horizon must be finite and > 0 (got {})", self.horizon));
        }
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0 && dt <= self.horizon) {
                out.push(format!("dt must lie in (0, horizon] (got {dt})"));
            }
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            out.push(format!("M must be finite and > 0 (got {})", self.m));
        }
        let cap = self.horizon * self.m;
        if !(self.c_budget.is_finite() && self.c_budget > 0.0 && self.c_budget < cap) {
            out.push(format!("c_budget must lie in (0, T M) = (0, {cap}) (got {})", self.c_budget));
        }
        if self.c_list.is_empty() {
            out.push("c_list must not be empty".into());
        }
        for (i, c) in self.c_list.iter().enumerate() {
            if !(c.is_finite() && *c > 0.0 && *c < cap) {
                out.push(format!("c_list[{i}] must lie in (0, T M) = (0, {cap}) (got {c})"));
            }
        }
        if let Some(kappa) = self.kappa {
            if !(kappa > 0.0 && kappa < 0.5 * self.m) {
                out.push(format!("kappa must lie in (0, M/2) (got {kappa})"));
            }
        }
        if let Some([n1, n2]) = self.initial_state {
            if !(n1.is_finite() && n2.is_finite() && n1 >= 0.0 && n2 >= 0.0 && n1 + n2 > 0.0) {
                out.push(format!("initial_state must be non-negative with n1 + n2 > 0 (got ({n1}, {n2}))"));
            }
        }
        if !(self.cell_time_limit_s.is_finite() && self.cell_time_limit_s > 0.0) {
            out.push(format!("cell_time_limit_s must be > 0 (got {})", self.cell_time_limit_s));
        }
        let o = &self.optimizer;
        if !(o.tol.is_finite() && o.tol > 0.0) {
            out.push(format!("optimizer.tol must be > 0 (got {})", o.tol));
        }
        if o.max_iter == 0 {
            out.push("optimizer.max_iter must be > 0".into());
        }
        if !(o.stall_rtol.is_finite() && o.stall_rtol >= 0.0) {
            out.push(format!("optimizer.stall_rtol must be >= 0 (got {})", o.stall_rtol));
        }
        if o.starts.is_empty() {
            out.push("optimizer.starts must not be empty".into());
        }
        for s in &o.starts {
            let known = matches!(s.as_str(), "zero" | "uniform" | "all_m" | "analytic")
                || s.strip_prefix("random_").is_some_and(|k| k.parse::<u64>().is_ok());
            if !known {
                out.push(format!("optimizer.starts: unknown start `{s}`"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Copy with `kappa` and `initial_state` filled in.
    pub fn resolved(&self) -> RunConfig {
        let mut r = self.clone();
        r.kappa = Some(self.kappa());
        r.initial_state = Some(self.initial_population(self.eps).as_array());
        r
    }

    fn initial_population(&self, eps: f64) -> PopulationState {
        match self.initial_state {
            Some([n1, n2]) => PopulationState::new(n1, n2),
            None => slowfast::from_slowfast_unchecked(self.slowfast_params(eps).initial_state(), eps, self.k),
        }
    }

    fn write_resolved(&self, out: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.resolved()).expect("config serialises");
        write_file(out, "config.json", json.as_bytes())
    }

    fn inits(&self, set: &AdmissibleSet, analytic: &ControlSignal) -> Result<Vec<(String, ControlSignal)>> {
        self.optimizer
            .starts
            .iter()
            .map(|l| Ok((l.clone(), named_init(l, set, Some(analytic), self.seed)?)))
            .collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(vec![format!("cannot start {} workers: {e}", self.jobs)]))
    }
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("summary serialises");
    write_file(out, name, json.as_bytes())
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateEntry {
    pub label: &'static str,
    pub n1: f64,
    pub n2: f64,
    /// Sup norm of the uncontrolled field at the state.
    pub residual: f64,
    /// `[re, im]` pairs.
    pub eigenvalues: [[f64; 2]; 2],
    pub stability: Stability,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateReport {
    pub eps: f64,
    pub params: ModelParams,
    pub viable: bool,
    pub fitness_ratio: f64,
    pub coexistence_condition: bool,
    pub states: Vec<SteadyStateEntry>,
}

pub fn steady_state_report(params: &ModelParams, eps: f64) -> SteadyStateReport {
    let states = model::classify_stability(params)
        .entries
        .into_iter()
        .map(|e| {
            let f = params.field(e.state.n1, e.state.n2, 0.0);
            SteadyStateEntry {
                label: e.label,
                n1: e.state.n1,
                n2: e.state.n2,
                residual: f[0].abs().max(f[1].abs()),
                eigenvalues: e.eigenvalues.map(|z| [z.re, z.im]),
                stability: e.stability,
            }
        })
        .collect();
    SteadyStateReport {
        eps,
        params: *params,
        viable: params.is_viable(),
        fitness_ratio: params.fitness_ratio(),
        coexistence_condition: params.has_coexistence(),
        states,
    }
}

/// `steady_states.json` and `steady_states.csv` for `b_i = b_i⁰ / eps`.
pub fn cmd_steady_states(cfg: &RunConfig, out: &Path) -> Result<SteadyStateReport> {
    cfg.validate()?;
    let params = cfg.slowfast_params(cfg.eps).model_params();
    let report = steady_state_report(&params, cfg.eps);
    let mut csv = String::from("label,n1,n2,residual,eig1_re,eig1_im,eig2_re,eig2_im,stability\n");
    for s in &report.states {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            s.label,
            fmt_f64(s.n1),
            fmt_f64(s.n2),
            fmt_f64(s.residual),
            fmt_f64(s.eigenvalues[0][0]),
            fmt_f64(s.eigenvalues[0][1]),
            fmt_f64(s.eigenvalues[1][0]),
            fmt_f64(s.eigenvalues[1][1]),
            s.stability.as_str()
        );
    }
    cfg.write_resolved(out)?;
    write_file(out, "steady_states.csv", csv.as_bytes())?;
    write_json(out, "steady_states.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlSource {
    Zero,
    Analytic,
    /// CSV with a header and `t,u` rows, one per grid cell.
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// `(n1, n2)` with `b_i = b_i⁰ / eps`.
    Full,
    /// `(n, p)`.
    Slowfast,
    /// `p` only.
    Reduced,
}

/// Reads a `t,u` control file written by [`ControlSignal::write_csv`].
pub fn read_control(path: &Path, grid: TimeGrid) -> Result<ControlSignal> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(vec![format!("cannot read control {}: {e}", path.display())]))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let u = line
            .split(',')
            .nth(1)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidConfig(vec![format!("{}:{}: expected `t,u`", path.display(), i + 1)]))?;
        values.push(u);
    }
    if values.len() != grid.steps() {
        return Err(Error::GridMismatch(format!(
            "{} has {} rows, the grid has {} cells",
            path.display(),
            values.len(),
            grid.steps()
        )));
    }
    ControlSignal::new(grid, values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub system: SystemKind,
    pub eps: f64,
    pub control: String,
    pub budget: f64,
    pub steps: usize,
    pub final_n1: f64,
    pub final_n2: f64,
    pub final_p: f64,
    /// `J^eps` for the full and slow-fast systems, `J0` for the reduced one.
    pub cost: f64,
}

/// `trajectory.csv` and `summary.json`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, source: &ControlSource, system: SystemKind) -> Result<SimulationSummary> {
    cfg.validate()?;
    let eps = cfg.eps;
    let grid = cfg.grid(eps)?;
    let params = cfg.slowfast_params(eps);
    let (control, label) = match source {
        ControlSource::Zero => (ControlSignal::zeros(grid), "zero".to_string()),
        ControlSource::Analytic => {
            let sol = reduced::solve_reduced_analytic(grid, cfg.c_budget, cfg.m, &cfg.reduced_model()?)?;
            (sol.control, "analytic".to_string())
        }
        ControlSource::File(p) => (read_control(p, grid)?, p.display().to_string()),
    };
    let x0 = cfg.initial_population(eps);
    let opts = NewtonOptions::default();
    let mut csv = String::new();
    let (n1, n2, p, cost) = match system {
        SystemKind::Full => {
            let mp = params.model_params();
            let traj = integrate(&mp, x0.as_array(), &control, &opts, false)?;
            csv.push_str("t,n1,n2\n");
            push_rows(&mut csv, &traj);
            let last = PopulationState::from(*traj.last());
            (last.n1, last.n2, last.infected_fraction(), model::objective_j(last, &mp))
        }
        SystemKind::Slowfast => {
            let s0 = slowfast::to_slowfast(x0, eps, cfg.k)?;
            let traj = slowfast::simulate_from(s0, &control, &params, &opts, false)?;
            csv.push_str("t,n,p,n1,n2\n");
            for (k, s) in traj.states.iter().enumerate() {
                let pop = slowfast::from_slowfast_unchecked(SlowFastState::from(*s), eps, cfg.k);
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    fmt_f64(grid.time(k)),
                    fmt_f64(s[0]),
                    fmt_f64(s[1]),
                    fmt_f64(pop.n1),
                    fmt_f64(pop.n2)
                );
            }
            let last = SlowFastState::from(*traj.last());
            let pop = slowfast::from_slowfast_unchecked(last, eps, cfg.k);
            (pop.n1, pop.n2, last.p, slowfast::terminal_cost(last, &params))
        }
        SystemKind::Reduced => {
            let model = cfg.reduced_model()?;
            let total = x0.total();
            if total <= 0.0 {
                return Err(Error::EmptyPopulation);
            }
            let traj = integrate(&model, [x0.n2 / total], &control, &opts, false)?;
            csv.push_str("t,p\n");
            push_rows(&mut csv, &traj);
            let p = traj.last()[0];
            (cfg.k * (1.0 - p), cfg.k * p, p, reduced::terminal_cost(p, &model))
        }
    };
    let summary = SimulationSummary {
        system,
        eps,
        control: label,
        budget: control.budget(),
        steps: grid.steps(),
        final_n1: n1,
        final_n2: n2,
        final_p: p,
        cost,
    };
    cfg.write_resolved(out)?;
    write_file(out, "trajectory.csv", csv.as_bytes())?;
    write_json(out, "summary.json", &summary)?;
    Ok(summary)
}

fn push_rows<const D: usize>(csv: &mut String, traj: &Trajectory<D>) {
    for (k, s) in traj.states.iter().enumerate() {
        let _ = write!(csv, "{}", fmt_f64(traj.grid.time(k)));
        for v in s {
            let _ = write!(csv, ",{}", fmt_f64(*v));
        }
        csv.push('\n');
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedReport {
    pub c: f64,
    pub m: f64,
    pub horizon: f64,
    pub steps: usize,
    pub theta: f64,
    pub xi: f64,
    pub p_star: f64,
    pub max_neg_fg: f64,
    /// `K² (1 - theta)²`.
    pub threshold_cost: f64,
    pub solution: AnalyticSolution,
}

/// `solution.json` and `control.csv`.
pub fn cmd_solve_reduced(cfg: &RunConfig, out: &Path) -> Result<ReducedReport> {
    cfg.validate()?;
    let model = cfg.reduced_model()?;
    let grid = cfg.grid(cfg.eps)?;
    let solution = reduced::solve_reduced_analytic(grid, cfg.c_budget, cfg.m, &model)?;
    let report = ReducedReport {
        c: cfg.c_budget,
        m: cfg.m,
        horizon: cfg.horizon,
        steps: grid.steps(),
        theta: model.theta,
        xi: model.xi,
        p_star: model.p_star,
        max_neg_fg: model.max_neg_fg,
        threshold_cost: model.threshold_cost(),
        solution,
    };
    let mut control = Vec::new();
    report.solution.control.write_csv(&mut control)?;
    cfg.write_resolved(out)?;
    write_file(out, "control.csv", &control)?;
    write_json(out, "solution.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeSummary {
    pub eps: f64,
    pub c: f64,
    pub m: f64,
    pub dt: f64,
    pub steps: usize,
    pub result: OptimResult,
    /// `J^eps` of the reduced optimum on the same grid.
    pub j_ustar: f64,
    pub rel_gap: f64,
    pub l1_to_analytic: f64,
    pub structure: StructureReport,
    pub switching_violations: usize,
    pub switching_lambda: f64,
}

/// Switching function `q2` of the slow-fast problem along its own trajectory.
pub fn full_switching(
    control: &ControlSignal,
    params: &SlowFastParams,
    m: f64,
    kappa: f64,
    method: GradientMethod,
) -> Result<SwitchingReport> {
    let traj = slowfast::simulate(control, params, &NewtonOptions::default(), method == GradientMethod::Discrete)?;
    let g = gradient_full_on(&traj, control, params, method)?;
    let dt = control.grid.dt();
    Ok(switching_from_kernel(control, g.values.iter().map(|v| v / dt).collect(), m, kappa))
}

/// Optimises at `cfg.eps`, `cfg.c_budget` and writes `control.csv`,
/// `history.csv`, `structure.txt`, `switching.csv` and `summary.json`.
pub fn cmd_optimize_full(cfg: &RunConfig, out: &Path) -> Result<OptimizeSummary> {
    cfg.validate()?;
    let summary = optimize_cell(cfg, cfg.eps, cfg.c_budget, None)?;
    let set = AdmissibleSet::new(cfg.grid(cfg.eps)?, cfg.c_budget, cfg.m)?;
    let params = cfg.slowfast_params(cfg.eps);
    let sw = full_switching(&summary.result.control, &params, cfg.m, cfg.kappa(), cfg.optimizer.gradient)?;
    let summary = OptimizeSummary {
        switching_violations: sw.violation_count,
        switching_lambda: sw.lambda_estimate,
        ..summary
    };
    let mut switching = Vec::new();
    sw.write_csv(&mut switching)?;
    cfg.write_resolved(out)?;
    summary.result.write_files(out, &set, cfg.kappa())?;
    write_file(out, "switching.csv", &switching)?;
    write_json(out, "summary.json", &summary)?;
    Ok(summary)
}

fn optimize_cell(cfg: &RunConfig, eps: f64, c: f64, time_limit: Option<Duration>) -> Result<OptimizeSummary> {
    let params = cfg.slowfast_params(eps);
    params.validate()?;
    let model = cfg.reduced_model()?;
    let grid = cfg.grid(eps)?;
    let set = AdmissibleSet::new(grid, c, cfg.m)?;
    let sol = reduced::solve_reduced_analytic(grid, c, cfg.m, &model)?;
    let inits = cfg.inits(&set, &sol.control)?;
    let opts = OptimOptions {
        time_limit,
        ..cfg.optim_options()
    };
    let problem = FullProblem::new(params, cfg.optimizer.gradient);
    let result = optimize(&problem, &set, &opts, &inits)?;
    let j_ustar = slowfast::j_eps(&sol.control, &params, &NewtonOptions::default())?;
    let structure = structure_report(&result.control, cfg.m, cfg.kappa())?;
    Ok(OptimizeSummary {
        eps,
        c,
        m: cfg.m,
        dt: grid.dt(),
        steps: grid.steps(),
        j_ustar,
        rel_gap: (j_ustar - result.cost) / result.cost,
        l1_to_analytic: l1_distance(&result.control, &sol.control)?,
        structure,
        switching_violations: 0,
        switching_lambda: f64::NAN,
        result,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub eps: f64,
    pub c: f64,
    pub steps: usize,
    pub j_hat: f64,
    pub j_ustar: f64,
    pub rel_gap: f64,
    /// `sup_t |p^eps(t) - p0*(t)|` over grid nodes.
    pub p_err_sup: f64,
    pub u_err_l1: f64,
    pub runtime_s: f64,
    pub stop: Option<StopReason>,
    pub error: Option<String>,
}

impl SweepRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn status(&self) -> String {
        match (&self.error, self.stop) {
            (Some(e), _) => csv_text(e),
            (None, Some(s)) => serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            (None, None) => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub c: f64,
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    /// `eps,J_hat,J_ustar,rel_gap,p_err_sup,u_err_L1,runtime_s,status`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,J_hat,J_ustar,rel_gap,p_err_sup,u_err_L1,runtime_s,status\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.3},{}",
                fmt_f64(r.eps),
                fmt_f64(r.j_hat),
                fmt_f64(r.j_ustar),
                fmt_f64(r.rel_gap),
                fmt_f64(r.p_err_sup),
                fmt_f64(r.u_err_l1),
                r.runtime_s,
                r.status()
            );
        }
        s
    }
}

fn eps_cell(cfg: &RunConfig, eps: f64, c: f64) -> Result<SweepRecord> {
    let limit = Duration::from_secs_f64(cfg.cell_time_limit_s);
    let t0 = Instant::now();
    let s = optimize_cell(cfg, eps, c, Some(limit))?;
    let params = cfg.slowfast_params(eps);
    let model = cfg.reduced_model()?;
    let sol = reduced::solve_reduced_analytic(s.result.control.grid, c, cfg.m, &model)?;
    let p_hat = slowfast::simulate(&s.result.control, &params, &NewtonOptions::default(), false)?;
    let p0 = reduced::simulate_reduced(&sol.control, &model, &NewtonOptions::default())?;
    let p_err_sup = p_hat
        .states
        .iter()
        .zip(&p0.states)
        .map(|(a, b)| (a[1] - b[0]).abs())
        .fold(0.0, f64::max);
    Ok(SweepRecord {
        eps,
        c,
        steps: s.steps,
        j_hat: s.result.cost,
        j_ustar: s.j_ustar,
        rel_gap: s.rel_gap,
        p_err_sup,
        u_err_l1: s.l1_to_analytic,
        runtime_s: t0.elapsed().as_secs_f64(),
        stop: Some(s.result.stop),
        error: None,
    })
}

/// Runs every `eps` in `cfg.eps_list` at `C = cfg.c_budget` without writing files.
/// Failed cells keep their row with the error text.
pub fn sweep_eps(cfg: &RunConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let c = cfg.c_budget;
    let records = cfg.pool()?.install(|| {
        cfg.eps_list
            .par_iter()
            .map(|&eps| {
                let t0 = Instant::now();
                eps_cell(cfg, eps, c).unwrap_or_else(|e| SweepRecord {
                    eps,
                    c,
                    steps: 0,
                    j_hat: f64::NAN,
                    j_ustar: f64::NAN,
                    rel_gap: f64::NAN,
                    p_err_sup: f64::NAN,
                    u_err_l1: f64::NAN,
                    runtime_s: t0.elapsed().as_secs_f64(),
                    stop: None,
                    error: Some(match e {
                        Error::TimedOut(_) => "timed_out".to_string(),
                        e => format!("error: {e}"),
                    }),
                })
            })
            .collect()
    });
    Ok(SweepResult { c, records })
}

/// `sweep_eps.csv` and `sweep_eps.json`.
pub fn cmd_sweep_eps(cfg: &RunConfig, out: &Path) -> Result<SweepResult> {
    let result = sweep_eps(cfg)?;
    cfg.write_resolved(out)?;
    write_file(out, "sweep_eps.csv", result.to_csv().as_bytes())?;
    write_json(out, "sweep_eps.json", &result)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCRow {
    pub c: f64,
    pub case: reduced::ReleaseCase,
    pub j0: f64,
    pub p_final: f64,
    /// `p(T) > theta`.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCResult {
    pub m: f64,
    pub theta: f64,
    pub threshold_cost: f64,
    pub c_star: Option<f64>,
    pub rows: Vec<SweepCRow>,
    /// `(last failure, first success)` after bisection, when the list brackets the transition.
    pub bracket: Option<(f64, f64)>,
}

impl SweepCResult {
    /// `C,case,J0,p_T,success`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("C,case,J0,p_T,success\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", fmt_f64(r.c), r.case.as_str(), fmt_f64(r.j0), fmt_f64(r.p_final), r.success);
        }
        s
    }
}

fn c_row(c: f64, grid: TimeGrid, m: f64, model: &ReducedModel) -> Result<SweepCRow> {
    let sol = reduced::solve_reduced_analytic(grid, c, m, model)?;
    let traj = reduced::simulate_reduced(&sol.control, model, &NewtonOptions::default())?;
    let p_final = traj.last()[0];
    Ok(SweepCRow {
        c,
        case: sol.case,
        j0: reduced::terminal_cost(p_final, model),
        p_final,
        success: p_final > model.theta,
    })
}

/// Analytic solution for every `C` in `cfg.c_list`, then bisection on the
/// success flag between the last failure and the first success.
pub fn sweep_c(cfg: &RunConfig) -> Result<SweepCResult> {
    cfg.validate()?;
    let model = cfg.reduced_model()?;
    let grid = cfg.grid(cfg.eps)?;
    let mut cs = cfg.c_list.clone();
    cs.sort_by(f64::total_cmp);
    let rows = cs.iter().map(|&c| c_row(c, grid, cfg.m, &model)).collect::<Result<Vec<_>>>()?;
    let last_fail = rows.iter().filter(|r| !r.success).map(|r| r.c).next_back();
    let first_ok = rows.iter().find(|r| r.success).map(|r| r.c);
    let bracket = match (last_fail, first_ok) {
        (Some(mut lo), Some(mut hi)) if lo < hi => {
            for _ in 0..60 {
                if hi - lo <= 1e-9 * hi {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if c_row(mid, grid, cfg.m, &model)?.success {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Some((lo, hi))
        }
        _ => None,
    };
    let c_star = if cfg.m > model.max_neg_fg { Some(reduced::c_star(cfg.m, &model)?) } else { None };
    Ok(SweepCResult {
        m: cfg.m,
        theta: model.theta,
        threshold_cost: model.threshold_cost(),
        c_star,
        rows,
        bracket,
    })
}

/// `sweep_c.csv` and `sweep_c.json`.
pub fn cmd_sweep_c(cfg: &RunConfig, out: &Path) -> Result<SweepCResult> {
    let result = sweep_c(cfg)?;
    cfg.write_resolved(out)?;
    write_file(out, "sweep_c.csv", result.to_csv().as_bytes())?;
    write_json(out, "sweep_c.json", &result)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Largest steady-state residual of the uncontrolled field.
pub fn check_residuals(params: &ModelParams, tol: f64) -> CheckOutcome {
    let r = steady_state_report(params, 1.0);
    let worst = r.states.iter().map(|s| s.residual).fold(0.0, f64::max);
    outcome("steady_state_residuals", worst < tol, format!("{} states, max residual {worst:e}", r.states.len()))
}

/// Extinction unstable, both single-population states stable, coexistence
/// unstable. Only meaningful for viable parameters with a coexistence state.
pub fn check_stability_labels(params: &ModelParams) -> CheckOutcome {
    if !(params.is_viable() && params.has_coexistence()) {
        return outcome("stability_labels", true, "skipped: no coexistence state for these parameters".into());
    }
    let report = model::classify_stability(params);
    let expected = [
        ("extinction", Stability::Unstable),
        ("wild_only", Stability::Stable),
        ("infected_only", Stability::Stable),
        ("coexistence", Stability::Unstable),
    ];
    let mut bad = Vec::new();
    for (label, want) in expected {
        match report.get(label) {
            Some(e) if e.stability == want => {}
            Some(e) => bad.push(format!("{label} is {}", e.stability.as_str())),
            None => bad.push(format!("{label} missing")),
        }
    }
    let detail = if bad.is_empty() { "all four labels as expected".to_string() } else { bad.join("; ") };
    outcome("stability_labels", bad.is_empty(), detail)
}

/// Integrates `pairs` ordered pairs (`n1⁻ < n1⁺`, `n2⁻ > n2⁺`) under a common
/// random admissible control and checks the order at every node.
pub fn check_comparison(params: &ModelParams, set: &AdmissibleSet, pairs: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = NewtonOptions::default();
    let mut broken = 0;
    for i in 0..pairs {
        let control = named_init(&format!("random_{i}"), set, None, seed)?;
        let lo = 1e-6;
        let hi = params.k;
        let mut a = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let mut b = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        if a[0] > b[0] {
            std::mem::swap(&mut a[0], &mut b[0]);
        }
        if a[1] < b[1] {
            std::mem::swap(&mut a[1], &mut b[1]);
        }
        if a[0] == b[0] || a[1] == b[1] {
            continue;
        }
        // a = (n1⁻, n2⁻), b = (n1⁺, n2⁺)
        let ta = integrate(params, a, &control, &opts, false)?;
        let tb = integrate(params, b, &control, &opts, false)?;
        if ta.states.iter().zip(&tb.states).any(|(x, y)| !(x[0] < y[0] && x[1] > y[1])) {
            broken += 1;
        }
    }
    Ok(outcome("comparison_principle", broken == 0, format!("{broken} of {pairs} ordered pairs lost their order")))
}

/// `0 <= p <= 1 + 1e-10` and `n` inside the uniform bounds (+1e-6) for
/// random admissible controls, cycling through `eps_values`.
pub fn check_confinement(cfg: &RunConfig, eps_values: &[f64], controls: usize) -> Result<CheckOutcome> {
    let b = slowfast::bounds(&cfg.slowfast_params(1.0), cfg.m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = NewtonOptions::default();
    let mut bad = Vec::new();
    let (mut p_min, mut p_max, mut n_min, mut n_max) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..controls {
        let eps = eps_values[i % eps_values.len()];
        if eps > b.eps0 {
            continue;
        }
        let params = cfg.slowfast_params(eps);
        let grid = cfg.grid(eps)?;
        let set = AdmissibleSet::new(grid, cfg.c_budget, cfg.m)?;
        let control = if i % 2 == 0 {
            named_init(&format!("random_{i}"), &set, None, cfg.seed)?
        } else {
            let len = cfg.c_budget / cfg.m;
            let start = rng.gen_range(0.0..cfg.horizon - len);
            ControlSignal::block(grid, start, start + len, cfg.m)
        };
        let traj = slowfast::simulate(&control, &params, &opts, false)?;
        for s in &traj.states {
            p_min = p_min.min(s[1]);
            p_max = p_max.max(s[1]);
            n_min = n_min.min(s[0]);
            n_max = n_max.max(s[0]);
        }
        let ok_p = traj.states.iter().all(|s| s[1] >= 0.0 && s[1] <= 1.0 + 1e-10);
        let ok_n = traj.states.iter().all(|s| b.contains(s[0], 1e-6));
        if !(ok_p && ok_n) {
            bad.push(format!("control {i} (eps {eps})"));
        }
    }
    Ok(outcome(
        "frequency_and_deficit_bounds",
        bad.is_empty(),
        format!(
            "p in [{p_min:e}, {p_max:e}], n in [{n_min:.6}, {n_max:.6}] vs bounds [{:.6}, {:.6}]{}",
            b.n_minus,
            b.n_plus,
            if bad.is_empty() { String::new() } else { format!("; violations: {}", bad.join(", ")) }
        ),
    ))
}

/// Model invariants on the phase-portrait parameters and on the config's
/// biology at `eps = 1`.
pub fn invariant_suite(cfg: &RunConfig) -> Result<CheckReport> {
    cfg.validate()?;
    let fig = ModelParams::phase_portrait();
    let table = cfg.slowfast_params(1.0).model_params();
    let grid = TimeGrid::new(cfg.horizon, 1000)?;
    let set = AdmissibleSet::new(grid, cfg.c_budget, cfg.m)?;
    let mut checks = Vec::new();
    for (tag, p) in [("phase_portrait", &fig), ("config", &table)] {
        for mut c in [check_residuals(p, 1e-12), check_stability_labels(p)] {
            c.name = format!("{}[{tag}]", c.name);
            checks.push(c);
        }
        let mut c = check_comparison(p, &set, 25, cfg.seed)?;
        c.name = format!("{}[{tag}]", c.name);
        checks.push(c);
    }
    checks.push(check_confinement(cfg, &[1.0, 0.1, 0.01, 0.001], 50)?);
    Ok(CheckReport { checks })
}

/// Runs [`invariant_suite`] and writes `check.txt`.
pub fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<CheckReport> {
    let report = invariant_suite(cfg)?;
    cfg.write_resolved(out)?;
    write_file(out, "check.txt", report.to_text().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        RunConfig {
            dt: Some(0.01),
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        assert!(cfg.violations().is_empty(), "{:?}", cfg.violations());
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"c_budget": 0.4}"#).unwrap();
        assert_eq!(partial.c_budget, 0.4);
        assert_eq!(partial.m, 10.0);
        assert!(serde_json::from_str::<RunConfig>(r#"{"budget": 0.4}"#).is_err());
    }

    #[test]
    fn every_violation_is_listed() {
        let cfg = RunConfig {
            d1: -1.0,
            s_h: 2.0,
            c_budget: 200.0,
            eps_list: vec![0.1, 1.0],
            kappa: Some(9.0),
            ..RunConfig::default()
        };
        let v = cfg.violations();
        assert_eq!(v.len(), 5, "{v:?}");
        match cfg.validate() {
            Err(Error::InvalidConfig(list)) => assert_eq!(list, v),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            eps: Some(vec![0.1, 0.01]),
            c_budget: Some(vec![0.4]),
            kappa: Some(0.5),
            ..Overrides::default()
        });
        assert_eq!((cfg.eps, cfg.eps_list.clone()), (0.1, vec![0.1, 0.01]));
        assert_eq!((cfg.c_budget, cfg.c_list.clone()), (0.4, vec![0.4]));
        assert_eq!(cfg.kappa(), 0.5);
    }

    #[test]
    fn steady_states_for_the_reference_biology() {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_steady_states(&RunConfig::default(), dir.path()).unwrap();
        let wild = r.states.iter().find(|s| s.label == "wild_only").unwrap();
        let inf = r.states.iter().find(|s| s.label == "infected_only").unwrap();
        assert!((wild.n1 - 0.73).abs() < 1e-14);
        assert!((inf.n2 - 2.0 / 3.0).abs() < 1e-14);
        assert!(dir.path().join("steady_states.csv").exists());
        assert!(dir.path().join("config.json").exists());
    }

    #[test]
    fn simulate_zero_control_stays_put() {
        let dir = tempfile::tempdir().unwrap();
        let s = cmd_simulate(&quick(), dir.path(), &ControlSource::Zero, SystemKind::Full).unwrap();
        assert!((s.final_n1 - 0.73).abs() < 1e-12 && s.final_n2 == 0.0);
        let r = cmd_simulate(&quick(), dir.path(), &ControlSource::Zero, SystemKind::Reduced).unwrap();
        assert_eq!(r.final_p, 0.0);
    }

    #[test]
    fn control_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick();
        let grid = cfg.grid(cfg.eps).unwrap();
        let u = ControlSignal::block(grid, 2.0, 2.05, 10.0);
        let path = dir.path().join("u.csv");
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        std::fs::write(&path, buf).unwrap();
        assert_eq!(read_control(&path, grid).unwrap(), u);
        assert!(matches!(read_control(&path, TimeGrid::new(10.0, 10).unwrap()), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn sweep_c_brackets_the_threshold() {
        let cfg = quick();
        let r = sweep_c(&cfg).unwrap();
        assert_eq!(r.rows.len(), 13);
        let (lo, hi) = r.bracket.unwrap();
        assert!(lo < hi && hi - lo < 1e-6);
        assert!((lo - 0.24).abs() < 0.03, "{lo}");
        for row in &r.rows {
            assert_eq!(row.success, row.j0 < r.threshold_cost, "{row:?}");
        }
        assert_eq!(r.to_csv().lines().count(), 14);
    }

    #[test]
    fn sweep_records_failed_cells() {
        let cfg = RunConfig {
            eps_list: vec![1.0],
            cell_time_limit_s: 1e-9,
            ..quick()
        };
        let r = sweep_eps(&cfg).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].error.as_deref(), Some("timed_out"));
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",timed_out"));
    }
}
