//! Cost functional and Hamiltonian.

use crate::dynamics::{solve_euler, ControlSignal, ProblemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::segment::{dot, Segment};

/// `J(t, x, u) = int_t^T q(s, X(s), u(s)) ds + phi(X(T))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub running: f64,
    pub terminal: f64,
    pub total: f64,
}

/// Left-endpoint sum of the running cost over the first `steps` steps of
/// `tr`.
pub(crate) fn running_cost_sum(p: &ProblemSpec, tr: &Trajectory, steps: usize) -> f64 {
    let start = p.step_index(tr.start()).expect("trajectory start is on the grid");
    let mut acc = 0.0;
    for i in 0..steps {
        let n = start + i;
        let u = &p.controls()[tr.control().index_at_step(p, n)];
        acc += p.running_cost(p.time(n), tr.state(i), u) * p.dt();
    }
    acc
}

pub fn cost_of_trajectory(p: &ProblemSpec, tr: &Trajectory) -> CostReport {
    let running = running_cost_sum(p, tr, tr.len() - 1);
    let terminal = p.terminal_cost(tr.terminal_state());
    CostReport { running, terminal, total: running + terminal }
}

pub fn cost(p: &ProblemSpec, t: f64, x: &Segment, u: &ControlSignal) -> Result<CostReport> {
    let tr = solve_euler(p, t, x, u)?;
    let report = cost_of_trajectory(p, &tr);
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("cost from t = {t} is {}", report.total)));
    }
    Ok(report)
}

/// The direction `p0` in which a test-function gradient acts on the atom at
/// `theta = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAtZero(Vec<f64>);

impl GradientAtZero {
    pub fn new(p0: Vec<f64>) -> Result<Self> {
        if p0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {p0:?}")));
        }
        Ok(Self(p0))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianValue {
    pub value: f64,
    /// Index into the control set of the first minimizer.
    pub argmin: usize,
}

/// `H(t, x, p0) = min_u <F(t, x(0), (a, x)_H, u) + b(t) x(-tau), p0> + q(t, x(0), u)`.
pub fn hamiltonian(p: &ProblemSpec, t: f64, x: &Segment, p0: &GradientAtZero) -> Result<HamiltonianValue> {
    p.check_segment(x)?;
    if p0.as_slice().len() != p.dim() {
        return Err(Error::InvalidProblem(format!(
            "gradient has dimension {}, problem has {}",
            p0.as_slice().len(),
            p.dim()
        )));
    }
    let mut best = HamiltonianValue { value: f64::INFINITY, argmin: 0 };
    for (i, u) in p.controls().iter().enumerate() {
        let v = p.velocity(t, x, u)?;
        let h = dot(&v, p0.as_slice()) + p.running_cost(t, x.at_zero(), u);
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("Hamiltonian term for control {u:?}")));
        }
        if h < best.value {
            best = HamiltonianValue { value: h, argmin: i };
        }
    }
    Ok(best)
}
