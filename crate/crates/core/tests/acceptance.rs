//! Acceptance suite: one line per criterion.
//!
//! Runs as a plain binary so the lines show up in `cargo test` output. Pass
//! criterion numbers as arguments to run a subset. A criterion can fail on a
//! `soft` sub-check (a documented limitation of the method or hardware) and
//! still leave the exit status at zero; any `hard` failure fails the run.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wolbachia::adjoint::{cost_and_gradient_full, cost_and_gradient_reduced, switching_analysis_with, GradientMethod};
use wolbachia::harness::{self, RunConfig};
use wolbachia::integrator::{convergence_order, ControlSignal, FnSystem, NewtonOptions, TimeGrid};
use wolbachia::model::{steady_states, ModelParams};
use wolbachia::optimizer::{default_inits, l1_distance, optimize, AdmissibleSet, OptimOptions, ReducedProblem};
use wolbachia::reduced::{c_star, j0, single_block_scan, solve_reduced_analytic, ReducedModel, ReleaseCase};
use wolbachia::slowfast::{self, SlowFastParams};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Default)]
struct Report {
    lines: Vec<String>,
    hard_fail: bool,
    soft_fail: bool,
}

impl Report {
    fn hard(&mut self, ok: bool, what: String) {
        self.hard_fail |= !ok;
        self.lines.push(format!("    [{}] {what}", if ok { "ok" } else { "FAIL" }));
    }

    /// Failure here is reported but does not fail the run.
    fn soft(&mut self, ok: bool, what: String) {
        self.soft_fail |= !ok;
        self.lines.push(format!("    [{}] {what}", if ok { "ok" } else { "FAIL, soft" }));
    }

    fn note(&mut self, what: String) {
        self.lines.push(format!("    {what}"));
    }
}

fn table1_reduced() -> ReducedModel {
    ReducedModel::table1()
}

fn criterion_1(r: &mut Report) -> Res<()> {
    let cs = c_star(10.0, &table1_reduced())?;
    r.hard((cs - 0.24).abs() <= 0.01, format!("C*(10) = {cs:.6}, target 0.24 +- 0.01"));
    Ok(())
}

fn criterion_2(r: &mut Report) -> Res<()> {
    let model = table1_reduced();
    let theta_formula = (1.0 - (0.27 * 0.9) / (0.3 * 1.0)) / 0.9;
    r.hard(
        (model.theta - theta_formula).abs() <= 1e-9,
        format!(
            "theta = {:.12} vs closed form {theta_formula:.12} (rounded reference 0.211111, diff {:.1e})",
            model.theta,
            (model.theta - 0.211111).abs()
        ),
    );
    r.hard(model.f(model.theta).abs() < 1e-14, format!("f(theta) = {:.1e}", model.f(model.theta)));
    let bar = (1.0 - model.theta).powi(2);
    let grid = TimeGrid::new(10.0, 4000)?;
    for (c, want) in [(0.75, ReleaseCase::EarlyRelease), (0.4, ReleaseCase::EarlyRelease), (0.15, ReleaseCase::LateRelease)] {
        let s = solve_reduced_analytic(grid, c, 10.0, &model)?;
        let side = match want {
            ReleaseCase::EarlyRelease => s.predicted_cost < bar,
            _ => s.predicted_cost > bar,
        };
        r.hard(
            s.case == want && side,
            format!("C = {c}: {} with J0 = {:.6} vs (1-theta)^2 = {bar:.6}", s.case.as_str(), s.predicted_cost),
        );
    }
    Ok(())
}

fn criterion_3(r: &mut Report) -> Res<()> {
    let model = table1_reduced();
    let grid = TimeGrid::new(10.0, 200)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // (C, M) pairs with C/M a whole number of 0.05 cells, on both sides of C*(M)
    for (c, m) in [(0.75, 7.5), (0.4, 8.0), (0.15, 3.0), (0.2, 2.0)] {
        let cs = c_star(m, &model)?;
        let sol = solve_reduced_analytic(grid, c, m, &model)?;
        let finals = single_block_scan(grid, c, m, &model)?;
        let best = finals
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &p)| if p > b.1 { (k, p) } else { b });
        let expected = if c > cs { 0 } else { finals.len() - 1 };
        r.hard(
            best.0 == expected,
            format!(
                "C = {c}, M = {m} (C* = {cs:.4}): best block starts at cell {} of {}, expected {expected} ({})",
                best.0,
                finals.len() - 1,
                sol.case.as_str()
            ),
        );
        let cells = (c / (m * grid.dt())).round() as usize;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..200 {
            let blocks = rng.gen_range(2..=4).min(cells.max(2));
            let mut values = vec![0.0; grid.steps()];
            let mut left = cells;
            // level M on `cells` distinct cells, grouped into up to `blocks` runs
            for b in 0..blocks {
                let len = if b + 1 == blocks { left } else { rng.gen_range(0..=left) };
                left -= len;
                let mut start = rng.gen_range(0..grid.steps());
                for _ in 0..len {
                    while values[start % grid.steps()] > 0.0 {
                        start += 1;
                    }
                    values[start % grid.steps()] = m;
                }
            }
            let u = ControlSignal::new(grid, values)?;
            let gain = sol.predicted_cost - j0(&u, &model)?;
            worst = worst.max(gain);
        }
        r.hard(worst <= 1e-4, format!("C = {c}, M = {m}: best random multi-block improvement {worst:.2e} (limit 1e-4)"));
    }
    Ok(())
}

fn random_control(grid: TimeGrid, rng: &mut ChaCha8Rng, m: f64) -> ControlSignal {
    let pieces = 20;
    let levels: Vec<f64> = (0..pieces).map(|_| rng.gen_range(0.0..0.2 * m)).collect();
    let n = grid.steps();
    ControlSignal::new(grid, (0..n).map(|k| levels[k * pieces / n]).collect()).unwrap()
}

fn random_direction(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pieces = 25;
    let levels: Vec<f64> = (0..pieces).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n).map(|k| levels[k * pieces / n] + 0.1 * rng.gen_range(-1.0..1.0)).collect()
}

fn criterion_4(r: &mut Report) -> Res<()> {
    let grid = TimeGrid::new(10.0, 2000)?;
    let model = table1_reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-4;
    let shift = |u: &ControlSignal, d: &[f64], s: f64| {
        ControlSignal::new(grid, u.values.iter().zip(d).map(|(a, b)| a + s * b).collect()).unwrap()
    };
    for method in [GradientMethod::Discrete, GradientMethod::Continuous] {
        let mut worst_reduced = 0.0f64;
        let mut worst_full = [0.0f64; 2];
        for _ in 0..20 {
            let u = random_control(grid, &mut rng, 10.0);
            let d = random_direction(grid.steps(), &mut rng);

            let (_, g) = cost_and_gradient_reduced(&u, &model, method)?;
            let fd = (j0(&shift(&u, &d, h), &model)? - j0(&shift(&u, &d, -h), &model)?) / (2.0 * h);
            worst_reduced = worst_reduced.max((g.dot(&d) - fd).abs() / fd.abs());

            for (i, eps) in [1.0, 0.1].into_iter().enumerate() {
                let p = SlowFastParams::table1(eps);
                let opts = NewtonOptions::default();
                let (_, g) = cost_and_gradient_full(&u, &p, method)?;
                let fd = (slowfast::j_eps(&shift(&u, &d, h), &p, &opts)? - slowfast::j_eps(&shift(&u, &d, -h), &p, &opts)?) / (2.0 * h);
                worst_full[i] = worst_full[i].max((g.dot(&d) - fd).abs() / fd.abs());
            }
        }
        let tag = match method {
            GradientMethod::Discrete => "discrete",
            GradientMethod::Continuous => "continuous",
        };
        let lines = [
            (worst_reduced, format!("{tag} adjoint, reduced: max relative error {worst_reduced:.2e} over 20 pairs")),
            (worst_full[0], format!("{tag} adjoint, full eps=1: max relative error {:.2e}", worst_full[0])),
            (worst_full[1], format!("{tag} adjoint, full eps=0.1: max relative error {:.2e}", worst_full[1])),
        ];
        for (err, what) in lines {
            if method == GradientMethod::Discrete {
                r.hard(err < 1e-4, what);
            } else {
                // O(dt) approximation of the discrete gradient; reported only
                r.note(format!("{what} (limit not applied)"));
            }
        }
    }
    Ok(())
}

fn criterion_5(r: &mut Report) -> Res<()> {
    let opts = NewtonOptions::default();
    let in_band = |o: f64| (1.8..=2.2).contains(&o);

    let linear = FnSystem(|x: &[f64; 1], u: f64, t: f64| [-2.0 * x[0] + t.cos() + u]);
    let s = convergence_order(&linear, [1.0], 2.0, &[0.1, 0.05, 0.025, 0.0125], |t| t.sin(), &opts)?;
    r.hard(in_band(s.order), format!("forced linear decay: order {:.3}", s.order));

    let oscillator = FnSystem(|x: &[f64; 2], _u: f64, _t: f64| [x[1], -x[0] - 0.1 * x[1] * (1.0 - x[0] * x[0])]);
    let s = convergence_order(&oscillator, [1.0, 0.0], 5.0, &[0.1, 0.05, 0.025, 0.0125], |_| 0.0, &opts)?;
    r.hard(in_band(s.order), format!("van der Pol type oscillator: order {:.3}", s.order));

    let full = SlowFastParams::table1(1.0).model_params();
    let x0 = [full.wild_equilibrium().unwrap(), 0.0];
    let s = convergence_order(&full, x0, 10.0, &[0.05, 0.025, 0.0125, 0.00625], |t| if t < 0.5 { 10.0 } else { 0.0 }, &opts)?;
    r.hard(in_band(s.order), format!("full system, bang-bang release on [0, 0.5]: order {:.3}", s.order));
    let s = convergence_order(&full, x0, 10.0, &[0.05, 0.025, 0.0125, 0.00625], |t| 1.0 + t.sin(), &opts)?;
    r.hard(in_band(s.order), format!("full system, smooth release: order {:.3}", s.order));

    let eps = 5e-4;
    let params = SlowFastParams::table1(eps);
    let grid = TimeGrid::with_step(10.0, slowfast::default_time_step(eps))?;
    let model = table1_reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut controls = vec![
        solve_reduced_analytic(grid, 0.75, 10.0, &model)?.control,
        solve_reduced_analytic(grid, 0.15, 10.0, &model)?.control,
    ];
    controls.push(random_control(grid, &mut rng, 10.0));
    let mut failures = 0;
    for u in &controls {
        if slowfast::simulate(u, &params, &opts, false).is_err() {
            failures += 1;
        }
    }
    r.hard(failures == 0, format!("slow-fast eps = 5e-4, dt = {}: {failures} of {} runs failed", grid.dt(), controls.len()));
    Ok(())
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn criterion_6(r: &mut Report) -> Res<()> {
    let eps_list = vec![1.0, 0.1, 0.01, 0.001];
    for c in [0.75, 0.15] {
        let cfg = RunConfig {
            c_budget: c,
            eps_list: eps_list.clone(),
            jobs: 4,
            ..RunConfig::default()
        };
        let sweep = harness::sweep_eps(&cfg)?;
        let ok = sweep.records.iter().all(|x| x.is_ok());
        r.hard(ok, format!("C = {c}: all {} cells completed", sweep.records.len()));
        let gaps: Vec<f64> = sweep.records.iter().map(|x| x.rel_gap).collect();
        let l1: Vec<f64> = sweep.records.iter().map(|x| x.u_err_l1).collect();
        for x in &sweep.records {
            r.note(format!(
                "C = {c}, eps = {:<6} J_hat {:.6} J_ustar {:.6} rel_gap {:.4e} u_err_L1 {:.5} p_err_sup {:.4} ({:.1} s, {:?})",
                x.eps, x.j_hat, x.j_ustar, x.rel_gap, x.u_err_l1, x.p_err_sup, x.runtime_s, x.stop
            ));
        }
        r.hard(gaps.iter().all(|g| *g > 0.0), format!("C = {c}: rel_gap positive in every cell"));
        r.hard(gaps.last() < gaps.first(), format!("C = {c}: rel_gap at eps = 0.001 below rel_gap at eps = 1"));
        r.hard(l1.last() < l1.first(), format!("C = {c}: L1 error at eps = 0.001 below L1 error at eps = 1"));
        r.soft(strictly_decreasing(&gaps), format!("C = {c}: rel_gap strictly decreasing in 1/eps {gaps:.4?}"));
        r.soft(strictly_decreasing(&l1), format!("C = {c}: L1 error strictly decreasing in 1/eps {l1:.6?}"));
    }
    Ok(())
}

fn criterion_7(r: &mut Report) -> Res<()> {
    let cfg = RunConfig::default();
    let fig = ModelParams::phase_portrait();
    let table = SlowFastParams::table1(1.0).model_params();

    let co = steady_states(&fig).coexistence.ok_or("no coexistence state")?;
    r.hard(
        (co.n1 - 0.296875).abs() < 1e-14 && (co.n2 - 0.203125).abs() < 1e-14,
        format!("phase-portrait coexistence state ({}, {})", co.n1, co.n2),
    );
    let set = AdmissibleSet::new(TimeGrid::new(10.0, 1000)?, 0.75, 10.0)?;
    for (tag, p) in [("phase portrait", &fig), ("reference, eps=1", &table)] {
        let c = harness::check_residuals(p, 1e-12);
        r.hard(c.passed, format!("{tag}: {}", c.detail));
        let c = harness::check_stability_labels(p);
        r.hard(c.passed, format!("{tag}: labels {}", c.detail));
        let c = harness::check_comparison(p, &set, 50, 7)?;
        r.hard(c.passed, format!("{tag}: {}", c.detail));
    }
    let c = harness::check_confinement(&cfg, &[1.0, 0.1, 0.01, 0.001], 50)?;
    r.hard(c.passed, format!("50 controls: {}", c.detail));
    Ok(())
}

fn criterion_8(r: &mut Report) -> Res<()> {
    let model = table1_reduced();
    // C/M is a whole number of cells for both budgets
    let grid = TimeGrid::new(10.0, 4000)?;
    let m = 10.0;
    for c in [0.15, 0.75] {
        let set = AdmissibleSet::new(grid, c, m)?;
        let sol = solve_reduced_analytic(grid, c, m, &model)?;
        let problem = ReducedProblem {
            model,
            method: GradientMethod::Discrete,
        };
        let res = optimize(&problem, &set, &OptimOptions::default(), &default_inits(&set, None, 8)?)?;
        let d = l1_distance(&res.control, &sol.control)?;
        let bound = 5.0 * grid.dt() * m;
        r.hard(d <= bound, format!("C = {c}: L1 to analytic {d:.3e} (limit {bound:.3e}), best start {}", res.start));
        r.hard(
            (res.cost - sol.predicted_cost).abs() <= 1e-4,
            format!("C = {c}: J0 {:.8} vs analytic {:.8}", res.cost, sol.predicted_cost),
        );
        let sw = switching_analysis_with(&res.control, &model, m, 1e-3 * m, GradientMethod::Discrete)?;
        r.hard(
            sw.violation_count == 0,
            format!(
                "C = {c}: {} switching violations ({} saturated, {} interior cells, lambda {:.4e})",
                sw.violation_count,
                sw.saturated.len(),
                sw.interior.len(),
                sw.lambda_estimate
            ),
        );
    }
    Ok(())
}

fn criterion_9(r: &mut Report) -> Res<()> {
    let dir = tempfile::tempdir()?;
    for c in [0.15, 0.4, 0.75] {
        let cfg = RunConfig {
            c_budget: c,
            eps: 1.0,
            ..RunConfig::default()
        };
        let s = harness::cmd_optimize_full(&cfg, &dir.path().join(format!("c{c}")))?;
        let st = &s.structure;
        let target = c.min(cfg.horizon * cfg.m);
        r.hard(
            (st.budget_used - target).abs() <= 1e-6,
            format!("C = {c}: budget used {:.10} (target {target})", st.budget_used),
        );
        let text = st.to_text();
        let im = text.lines().find(|l| l.starts_with("I_M")).unwrap_or("");
        let relax = text.lines().find(|l| l.starts_with("I_relax")).unwrap_or("");
        r.hard(st.boundary_anchored(), format!("C = {c}: {im} anchored at cell 1 and/or {}; {relax}", st.steps));
        r.note(format!("C = {c}: J_hat {:.8}, stop {:?} after {} iterations", s.result.cost, s.result.stop, s.result.n_iterations));
    }
    Ok(())
}

type Criterion = fn(&mut Report) -> Res<()>;

fn main() -> ExitCode {
    let all: [(u8, &str, Criterion, u64); 9] = [
        (1, "threshold C*(M)", criterion_1, 1),
        (2, "reduced case map", criterion_2, 5),
        (3, "exhaustive oracle", criterion_3, 60),
        (4, "gradient vs finite differences", criterion_4, 60),
        (5, "integrator order and stiffness", criterion_5, 30),
        (6, "eps -> 0 trend", criterion_6, 900),
        (7, "model invariants", criterion_7, 120),
        (8, "optimizer vs analytic optimum", criterion_8, 120),
        (9, "full-problem structure at eps = 1", criterion_9, 300),
    ];
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = false;
    for (id, name, run, budget) in all {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let mut r = Report::default();
        let t0 = Instant::now();
        if let Err(e) = run(&mut r) {
            r.hard(false, format!("error: {e}"));
        }
        let elapsed = t0.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        if !in_time {
            r.soft(false, format!("runtime {:.1} s over the {budget} s budget", elapsed.as_secs_f64()));
        }
        let status = if r.hard_fail || r.soft_fail { "FAIL" } else { "PASS" };
        println!("criterion {id} ({name}): {status} in {:.1} s", elapsed.as_secs_f64());
        for l in &r.lines {
            println!("{l}");
        }
        failed |= r.hard_fail;
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
