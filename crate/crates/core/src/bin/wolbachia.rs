use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wolbachia::harness::{self, ControlSource, Overrides, RunConfig, SystemKind};
use wolbachia::Error;

/// Optimal Wolbachia release schedules: simulations, the closed-form reduced
/// optimum, full-problem optimisation and parameter sweeps.
#[derive(Parser)]
#[command(name = "wolbachia", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take the reference values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scaling parameter(s); the first is used by single-run commands.
    #[arg(long, global = true, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    /// Release budget(s) C; the first is used by single-run commands.
    #[arg(long = "c-budget", global = true, value_delimiter = ',')]
    c_budget: Option<Vec<f64>>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    kappa: Option<f64>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Steady states, existence conditions and stability labels.
    SteadyStates,
    /// Integrates one system under a given control.
    Simulate {
        /// `zero`, `analytic`, or a path to a `t,u` CSV.
        #[arg(long, default_value = "zero")]
        control: String,
        #[arg(long, value_enum, default_value = "slowfast")]
        system: SystemKind,
    },
    /// Closed-form optimum of the reduced problem.
    SolveReduced,
    /// Projected-gradient optimum of the full problem at one eps.
    OptimizeFull,
    /// Full-problem optimum against the reduced optimum over the eps list.
    SweepEps,
    /// Reduced optimum over the C list and the success transition.
    SweepC,
    /// Model invariant suite.
    Check,
}

fn run(cli: Cli) -> wolbachia::Result<bool> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        eps: cli.common.eps.clone(),
        c_budget: cli.common.c_budget.clone(),
        dt: cli.common.dt,
        kappa: cli.common.kappa,
        jobs: cli.common.jobs,
        seed: cli.common.seed,
        out: cli.common.out.clone(),
    });
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::SteadyStates => {
            let r = harness::cmd_steady_states(&cfg, &out)?;
            println!("viable {} coexistence {}", r.viable, r.coexistence_condition);
            for s in &r.states {
                println!("{:<14} ({:.6}, {:.6}) {}", s.label, s.n1, s.n2, s.stability.as_str());
            }
        }
        Command::Simulate { control, system } => {
            let source = match control.as_str() {
                "zero" => ControlSource::Zero,
                "analytic" => ControlSource::Analytic,
                path => ControlSource::File(PathBuf::from(path)),
            };
            let s = harness::cmd_simulate(&cfg, &out, &source, system)?;
            println!("n1(T) {:.8} n2(T) {:.8} p(T) {:.8} cost {:.8}", s.final_n1, s.final_n2, s.final_p, s.cost);
        }
        Command::SolveReduced => {
            let r = harness::cmd_solve_reduced(&cfg, &out)?;
            let s = &r.solution;
            println!("case {} on [{}, {}]", s.case.as_str(), s.start, s.end);
            match s.c_star {
                Some(c) => println!("C* {c:.6}"),
                None => println!("C* undefined (M <= max(-f/g))"),
            }
            println!("theta {:.6} p* {:.6} J0 {:.8} threshold {:.8} inequality {}", r.theta, r.p_star, s.predicted_cost, r.threshold_cost, s.inequality_holds);
        }
        Command::OptimizeFull => {
            let s = harness::cmd_optimize_full(&cfg, &out)?;
            print!("{}", s.structure.to_text());
            println!(
                "J_hat {:.10} J_ustar {:.10} rel_gap {:.4e} stop {:?} after {} iterations (start {})",
                s.result.cost, s.j_ustar, s.rel_gap, s.result.stop, s.result.n_iterations, s.result.start
            );
            if !s.result.converged {
                eprintln!("warning: optimizer stopped with {:?}; outputs written", s.result.stop);
            }
        }
        Command::SweepEps => {
            let r = harness::cmd_sweep_eps(&cfg, &out)?;
            print!("{}", r.to_csv());
            return Ok(r.records.iter().all(|r| r.is_ok()));
        }
        Command::SweepC => {
            let r = harness::cmd_sweep_c(&cfg, &out)?;
            print!("{}", r.to_csv());
            match r.bracket {
                Some((lo, hi)) => println!("transition in [{lo:.6}, {hi:.6}]"),
                None => println!("no transition inside the C list"),
            }
        }
        Command::Check => {
            let r = harness::cmd_check(&cfg, &out)?;
            print!("{}", r.to_text());
            return Ok(r.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config(&e) { 1 } else { 2 })
        }
    }
}

fn is_config(e: &Error) -> bool {
    e.is_config_error() || matches!(e, Error::Io(_))
}
