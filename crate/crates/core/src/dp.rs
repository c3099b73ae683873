//! Value function by exhaustive control enumeration and the dynamic
//! programming principle.

use rayon::prelude::*;

use crate::control::{cost_of_trajectory, running_cost_sum};
use crate::dynamics::{fit_ratio, refinement_stable, solve_euler, ControlSignal, ProblemSpec};
use crate::error::{Error, Result};
use crate::segment::{norm, Segment};

pub const DEFAULT_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct ValueResult {
    pub value: f64,
    /// First minimizer in lexicographic order, earliest interval most
    /// significant.
    pub control: ControlSignal,
    pub enumerated: u64,
}

/// Number of control sequences with `intervals` entries over `choices`
/// control points, if it fits the budget.
fn enumeration_size(choices: usize, intervals: usize, budget: u64) -> Result<u64> {
    let required = (choices as u128).checked_pow(intervals as u32).unwrap_or(u128::MAX);
    if required > budget as u128 {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok(required as u64)
}

/// Digits of `code` in base `choices`, most significant first.
fn decode(mut code: u64, choices: usize, intervals: usize) -> Vec<usize> {
    let mut out = vec![0; intervals];
    for slot in out.iter_mut().rev() {
        *slot = (code % choices as u64) as usize;
        code /= choices as u64;
    }
    out
}

/// Minimum of `(value, code)` pairs; ties go to the smaller code so the
/// result does not depend on the reduction schedule.
fn lexicographic_min(a: (f64, u64), b: (f64, u64)) -> (f64, u64) {
    if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

/// Minimizes `eval` over all `choices^intervals` sequences.
fn enumerate_min(
    choices: usize,
    intervals: usize,
    budget: u64,
    eval: impl Fn(&[usize]) -> Result<f64> + Sync,
) -> Result<(f64, Vec<usize>, u64)> {
    let count = enumeration_size(choices, intervals, budget)?;
    let (value, code) = (0..count)
        .into_par_iter()
        .map(|code| {
            let v = eval(&decode(code, choices, intervals))?;
            if v.is_nan() {
                return Err(Error::NonFinite(format!("objective for control code {code}")));
            }
            Ok((v, code))
        })
        .try_reduce(|| (f64::INFINITY, u64::MAX), |a, b| Ok(lexicographic_min(a, b)))?;
    Ok((value, decode(code, choices, intervals), count))
}

pub fn value_bruteforce(p: &ProblemSpec, t: f64, x: &Segment) -> Result<ValueResult> {
    value_bruteforce_with_budget(p, t, x, DEFAULT_BUDGET)
}

/// `V(t, x) = min_u J(t, x, u)` over every piecewise-constant control.
pub fn value_bruteforce_with_budget(p: &ProblemSpec, t: f64, x: &Segment, budget: u64) -> Result<ValueResult> {
    p.check_segment(x)?;
    let (_, intervals) = p.control_intervals_from(t)?;
    let choices = p.controls().len();
    let (value, digits, enumerated) = enumerate_min(choices, intervals, budget, |digits| {
        let u = ControlSignal::new(p, t, digits.to_vec())?;
        let tr = solve_euler(p, t, x, &u)?;
        Ok(cost_of_trajectory(p, &tr).total)
    })?;
    Ok(ValueResult { value, control: ControlSignal::new(p, t, digits)?, enumerated })
}

pub fn dpp_residual(p: &ProblemSpec, t: f64, x: &Segment, s: f64) -> Result<f64> {
    dpp_residual_with_budget(p, t, x, s, DEFAULT_BUDGET)
}

/// `V(t, x) - min_{u on [t, s]} [ int_t^s q + V(s, X_s) ]`, with the inner
/// `V` itself computed by enumeration from the window `X_s`.
pub fn dpp_residual_with_budget(p: &ProblemSpec, t: f64, x: &Segment, s: f64, budget: u64) -> Result<f64> {
    let n_t = p.step_index(t)?;
    let n_s = p.step_index(s)?;
    if n_s < n_t {
        return Err(Error::TimeOrder(format!("s = {s} precedes t = {t}")));
    }
    if n_s != n_t {
        p.control_index(s)?;
    }
    let whole = value_bruteforce_with_budget(p, t, x, budget)?;
    if n_s == n_t {
        return Ok(whole.value - value_bruteforce_with_budget(p, t, x, budget)?.value);
    }
    let (first, _) = p.control_intervals_from(t)?;
    let (split, _) = p.control_intervals_from(s)?;
    let head_len = split - first;
    let filler = ControlSignal::constant(p, s, 0)?;
    let choices = p.controls().len();
    let (inner, _, _) = enumerate_min(choices, head_len, budget, |head| {
        let u = ControlSignal::spliced(p, t, head, &filler)?;
        let tr = solve_euler(p, t, x, &u)?;
        let running = running_cost_sum(p, &tr, n_s - n_t);
        let tail = value_bruteforce_with_budget(p, s, &tr.segment_at(s)?, budget)?;
        Ok(running + tail.value)
    })?;
    Ok(whole.value - inner)
}

/// Two initial data `(t, x)` and `(s, y)`.
#[derive(Debug, Clone)]
pub struct ValuePair {
    pub t: f64,
    pub x: Segment,
    pub s: f64,
    pub y: Segment,
}

impl ValuePair {
    pub fn new(t: f64, x: Segment, s: f64, y: Segment) -> Self {
        Self { t, x, s, y }
    }

    fn refined(&self, factor: usize) -> Self {
        Self::new(self.t, self.x.refined(factor), self.s, self.y.refined(factor))
    }
}

#[derive(Debug, Clone)]
pub struct ValueContinuityReport {
    /// Fitted constant of `|V(t,x)| <= C (1 + |x(0)| + |x|_H)`.
    pub growth: f64,
    pub refined_growth: f64,
    /// Fitted constant of the same-time Lipschitz estimate, if any pair has
    /// `t = s`.
    pub lipschitz: Option<f64>,
    pub refined_lipschitz: Option<f64>,
    /// Fitted constant of the mixed time/state estimate.
    pub mixed: f64,
    pub refined_mixed: f64,
    pub max_difference: f64,
    pub stable: bool,
}

struct ValueFit {
    growth: f64,
    lipschitz: Option<f64>,
    mixed: f64,
    max_difference: f64,
}

fn value_fit(p: &ProblemSpec, pairs: &[ValuePair], budget: u64) -> Result<ValueFit> {
    let mut growth = Vec::new();
    let mut lipschitz = Vec::new();
    let mut mixed = Vec::new();
    let mut max_difference: f64 = 0.0;
    for pair in pairs {
        let vx = value_bruteforce_with_budget(p, pair.t, &pair.x, budget)?.value;
        let vy = value_bruteforce_with_budget(p, pair.s, &pair.y, budget)?.value;
        for (v, z) in [(vx, &pair.x), (vy, &pair.y)] {
            growth.push((v.abs(), 1.0 + norm(z.at_zero()) + z.h_norm()));
        }
        let diff = (vx - vy).abs();
        max_difference = max_difference.max(diff);
        let dz = pair.x.sub(&pair.y)?;
        let dz0 = norm(dz.at_zero());
        if (pair.t - pair.s).abs() < 1e-12 {
            lipschitz.push((diff, dz0 + dz.h_norm()));
        }
        let size = 1.0 + norm(pair.x.at_zero()) + norm(pair.y.at_zero()) + pair.x.h_norm() + pair.y.h_norm();
        mixed.push((diff, size * (dz0 + (pair.s - pair.t).abs().sqrt() + dz.tail_integral_sup())));
    }
    Ok(ValueFit {
        growth: fit_ratio(growth),
        lipschitz: if lipschitz.is_empty() { None } else { Some(fit_ratio(lipschitz)) },
        mixed: fit_ratio(mixed),
        max_difference,
    })
}

/// Fits the constants of the value-function growth, same-time Lipschitz and
/// mixed time/state estimates, at the problem's step and at half of it.
pub fn value_continuity_report(p: &ProblemSpec, pairs: &[ValuePair]) -> Result<ValueContinuityReport> {
    value_continuity_report_with_budget(p, pairs, DEFAULT_BUDGET)
}

pub fn value_continuity_report_with_budget(
    p: &ProblemSpec,
    pairs: &[ValuePair],
    budget: u64,
) -> Result<ValueContinuityReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidProblem("value continuity report needs at least one pair".into()));
    }
    let coarse = value_fit(p, pairs, budget)?;
    let fine_pairs: Vec<ValuePair> = pairs.iter().map(|q| q.refined(2)).collect();
    let fine = value_fit(&p.refined()?, &fine_pairs, budget)?;
    let mut stable = refinement_stable(coarse.growth, fine.growth) && refinement_stable(coarse.mixed, fine.mixed);
    if let (Some(a), Some(b)) = (coarse.lipschitz, fine.lipschitz) {
        stable &= refinement_stable(a, b);
    }
    Ok(ValueContinuityReport {
        growth: coarse.growth,
        refined_growth: fine.growth,
        lipschitz: coarse.lipschitz,
        refined_lipschitz: fine.lipschitz,
        mixed: coarse.mixed,
        refined_mixed: fine.mixed,
        max_difference: coarse.max_difference,
        stable,
    })
}
