//! Command-line front end: subcommands, orchestration and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::comparison::{comparison_diagnostics, CandidateFamily, DoublingConfig, QuadPoint};
use crate::config::{load_problem, load_segment, RunConfig};
use crate::control::cost;
use crate::dp::{dpp_residual_with_budget, value_bruteforce_with_budget};
use crate::dynamics::{solve_euler, solve_picard, ControlSignal, ProblemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::generator::{hjb_residual, TestFunction};
use crate::segment::Segment;

#[derive(Debug, Parser)]
#[command(name = "delay-control", version, about = "Optimal control of delay equations on segment space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (flat key = value file).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for CSV output.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the state equation; writes trajectory.csv.
    Solve(Common),
    /// Evaluate the cost of one control; writes cost.csv.
    Cost(Common),
    /// Value function by enumeration; writes value.csv.
    Value(Common),
    /// Dynamic programming residuals at each control time; writes dpp.csv.
    DppCheck(Common),
    /// HJB residual of a test function along the time grid; writes hjb.csv.
    HjbResidual(Common),
    /// Doubling-of-variables diagnostics; writes compare.csv.
    CompareHarness(Common),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Solve(c)
            | Command::Cost(c)
            | Command::Value(c)
            | Command::DppCheck(c)
            | Command::HjbResidual(c)
            | Command::CompareHarness(c) => c,
        }
    }
}

/// Everything a subcommand needs, loaded from the config file.
struct Setup {
    cfg: RunConfig,
    problem: ProblemSpec,
    x: Segment,
    t: f64,
    budget: u64,
}

impl Setup {
    fn load(cfg: RunConfig, seed: u64) -> Result<Self> {
        let problem = load_problem(cfg.family(), &cfg)?;
        let x = load_segment(&problem, &cfg, seed)?;
        let t = cfg.f64_or("t", 0.0)?;
        problem.step_index(t)?;
        let budget = cfg.f64_or("budget", 1e6)?;
        if !(budget >= 1.0) {
            return Err(Error::Config(format!("budget must be at least 1, got {budget}")));
        }
        Ok(Self { cfg, problem, x, t, budget: budget as u64 })
    }

    /// `control = i` for a constant control, or one index per interval.
    fn control(&self) -> Result<ControlSignal> {
        let p = &self.problem;
        let Some(raw) = self.cfg.get("control") else { return ControlSignal::constant(p, self.t, 0) };
        let idx: Vec<usize> = raw
            .split(';')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("control: bad index {s:?}"))))
            .collect::<Result<_>>()?;
        if idx.len() == 1 {
            ControlSignal::constant(p, self.t, idx[0])
        } else {
            ControlSignal::new(p, self.t, idx)
        }
    }

    fn test_function(&self) -> Result<TestFunction> {
        let a = self.cfg.f64_or("tf_x0", 1.0)?;
        let b = self.cfg.f64_or("tf_t", 0.0)?;
        let c = self.cfg.f64_or("tf_const", 0.0)?;
        let h = self.cfg.f64_or("tf_h", 0.0)?;
        let k = self.cfg.f64_or("tf_b", 0.0)?;
        let d = self.problem.dim();
        let mut tf = TestFunction::new()
            .present_value(move |_, x0| a * x0.iter().sum::<f64>(), |_, _| 0.0, move |_, _| vec![a; d])
            .time_only(move |t| b * t + c, move |_| b);
        if h != 0.0 {
            tf = tf.h_type(move |_, r| h * r, move |_, _| h, |_, _| 0.0);
        }
        if k != 0.0 {
            let center = Segment::zeros(d, self.problem.tau(), self.problem.cells())?;
            tf = tf.b_type(move |r| k * r, move |_| k, center);
        }
        Ok(tf)
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_csv(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}

fn trajectory_csv(tr: &Trajectory, dim: usize) -> String {
    let mut out = String::from("s");
    for i in 1..=dim {
        let _ = write!(out, ",X_{i}");
    }
    out.push('\n');
    for (i, s) in tr.times().into_iter().enumerate() {
        let _ = write!(out, "{s}");
        for v in tr.state(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn solve(setup: &Setup) -> Result<String> {
    let p = &setup.problem;
    let u = setup.control()?;
    let tr = match setup.cfg.get("method").unwrap_or("euler") {
        "euler" => solve_euler(p, setup.t, &setup.x, &u)?,
        "picard" => {
            let tol = setup.cfg.f64_or("tol", 1e-10)?;
            let max_iter = setup.cfg.usize_or("max_iter", 200)?;
            solve_picard(p, setup.t, &setup.x, &u, tol, max_iter)?.trajectory
        }
        other => return Err(Error::Config(format!("method: expected euler or picard, got {other:?}"))),
    };
    Ok(trajectory_csv(&tr, p.dim()))
}

fn cost_csv(setup: &Setup) -> Result<String> {
    let c = cost(&setup.problem, setup.t, &setup.x, &setup.control()?)?;
    Ok(format!("t,running,terminal,total\n{},{},{},{}\n", setup.t, c.running, c.terminal, c.total))
}

fn value_csv(setup: &Setup) -> Result<String> {
    let p = &setup.problem;
    let v = value_bruteforce_with_budget(p, setup.t, &setup.x, setup.budget)?;
    let attained = cost(p, setup.t, &setup.x, &v.control)?.total;
    Ok(format!("t,s,V,residual\n{},{},{},{}\n", setup.t, p.horizon(), v.value, v.value - attained))
}

fn dpp_csv(setup: &Setup) -> Result<String> {
    let p = &setup.problem;
    let n_t = p.step_index(setup.t)?;
    let stride = p.stride();
    let mut times = vec![setup.t];
    times.extend((n_t / stride + 1..=p.steps() / stride).map(|i| p.time(i * stride)));
    let v = value_bruteforce_with_budget(p, setup.t, &setup.x, setup.budget)?.value;
    let mut out = String::from("t,s,V,residual\n");
    for s in times {
        let r = dpp_residual_with_budget(p, setup.t, &setup.x, s, setup.budget)?;
        let _ = writeln!(out, "{},{s},{v},{r}", setup.t);
    }
    Ok(out)
}

fn hjb_csv(setup: &Setup) -> Result<String> {
    let p = &setup.problem;
    let tf = setup.test_function()?;
    let mut out = String::from("t,x0,residual,hamiltonian_minimizer\n");
    for n in p.step_index(setup.t)?..p.steps() {
        let t = p.time(n);
        let r = hjb_residual(p, &tf, t, &setup.x)?;
        let _ = writeln!(
            out,
            "{t},{},{},{}",
            fmt_vec(setup.x.at_zero()),
            r.residual,
            fmt_vec(&p.controls()[r.minimizer])
        );
    }
    Ok(out)
}

fn compare_csv(setup: &Setup) -> Result<String> {
    let p = &setup.problem;
    let cfg = &setup.cfg;
    let alphas = cfg.f64_list("alpha")?.unwrap_or_else(|| vec![1.0, 10.0, 100.0, 1000.0]);
    let offset = cfg.f64_or("w_offset", 0.0)?;
    let jump = cfg.f64_or("w_jump", 0.0)?;
    let family = CandidateFamily {
        radius: cfg.f64_or("M", 2.0)?,
        lattice_step: cfg.f64_or("lattice_step", 0.5)?,
        extra_jumps: cfg.points("jumps", p.dim())?.unwrap_or_default(),
        ..CandidateFamily::default()
    };
    let budget = setup.budget;
    let v = |t: f64, x: &Segment| {
        let base = value_bruteforce_with_budget(p, t, x, budget)?.value;
        Ok(base + if x.at_zero()[0] > 0.0 { jump } else { 0.0 })
    };
    let w = |t: f64, x: &Segment| Ok(v(t, x)? + offset);
    let base = DoublingConfig::new(p, alphas[0], cfg.f64_or("epsilon", 1e-3)?, cfg.f64_or("delta", 0.1)?)?;
    let start = QuadPoint::diagonal(setup.t, setup.x.clone());
    let tol = cfg.f64_or("tol", 1e-9)?;
    let report = comparison_diagnostics(p, &w, &v, &base, &alphas, &start, &family, tol)?;
    let mut out = String::from("alpha,half_alpha_d,alpha_b_gap_sq,t_hat,s_hat,x0_hat,y0_hat,interior_flag\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.alpha,
            r.half_alpha_d,
            r.alpha_b_gap_sq,
            r.t_hat,
            r.s_hat,
            fmt_vec(&r.x0_hat),
            fmt_vec(&r.y0_hat),
            u8::from(r.interior)
        );
    }
    Ok(out)
}

/// Runs one subcommand and returns the path of the CSV it wrote.
pub fn run(command: &Command) -> Result<PathBuf> {
    let common = command.common();
    let cfg = RunConfig::load(&common.config)?;
    let setup = Setup::load(cfg, common.seed)?;
    let (name, body) = match command {
        Command::Solve(_) => ("trajectory.csv", solve(&setup)?),
        Command::Cost(_) => ("cost.csv", cost_csv(&setup)?),
        Command::Value(_) => ("value.csv", value_csv(&setup)?),
        Command::DppCheck(_) => ("dpp.csv", dpp_csv(&setup)?),
        Command::HjbResidual(_) => ("hjb.csv", hjb_csv(&setup)?),
        Command::CompareHarness(_) => ("compare.csv", compare_csv(&setup)?),
    };
    write_csv(&common.out, name, &body)
}

/// Single-line machine-readable error report.
pub fn error_line(e: &Error) -> String {
    let detail = e.to_string().replace(['\n', '\r'], " ");
    format!("error_code={} detail={detail}", e.code())
}
