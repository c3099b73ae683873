//! Controlled delay dynamics
//!
//! ```text
//! dX(s) = F(s, X(s), (a, X_s)_H, u(s)) ds + b(s) X(s - tau) ds,   X_t = x
//! ```
//!
//! solved on a uniform grid whose step equals the segment step, so every
//! trajectory window `X_s` is again a grid segment. Controls are piecewise
//! constant on a coarser control grid anchored at time zero.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::segment::{dot, grid_index, norm, Segment};

/// `F(s, x, memory, u, out)` writes the drift into `out`.
pub type DriftFn = dyn Fn(f64, &[f64], f64, &[f64], &mut [f64]) + Send + Sync;
/// `b(s, out)` writes the `d x d` row-major delay matrix into `out`.
pub type DelayFn = dyn Fn(f64, &mut [f64]) + Send + Sync;
pub type WeightFn = dyn Fn(f64) -> Vec<f64> + Send + Sync;
pub type RunningCostFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;
pub type TerminalCostFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Magnitude beyond which a trajectory is treated as a blow-up.
pub const BLOW_UP_LIMIT: f64 = 1e12;

/// Coefficients, cost data, control set and discretization of one problem.
#[derive(Clone)]
pub struct ProblemSpec {
    dim: usize,
    tau: f64,
    horizon: f64,
    cells: usize,
    control_step: f64,
    drift: Arc<DriftFn>,
    weight_fn: Arc<WeightFn>,
    weight: Segment,
    delay: Arc<DelayFn>,
    delay_sup: f64,
    delay_lipschitz: f64,
    running_cost: Arc<RunningCostFn>,
    terminal_cost: Arc<TerminalCostFn>,
    controls: Vec<Vec<f64>>,
    lipschitz: f64,
    weight_hypothesis: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("dim", &self.dim)
            .field("tau", &self.tau)
            .field("horizon", &self.horizon)
            .field("cells", &self.cells)
            .field("control_step", &self.control_step)
            .field("controls", &self.controls)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

pub struct ProblemBuilder {
    dim: usize,
    tau: f64,
    horizon: f64,
    cells: usize,
    control_step: Option<f64>,
    drift: Arc<DriftFn>,
    weight_fn: Arc<WeightFn>,
    delay: Arc<DelayFn>,
    delay_sup: f64,
    delay_lipschitz: f64,
    running_cost: Arc<RunningCostFn>,
    terminal_cost: Arc<TerminalCostFn>,
    controls: Vec<Vec<f64>>,
    lipschitz: f64,
    weight_hypothesis: bool,
}

impl ProblemBuilder {
    pub fn new(dim: usize, tau: f64, horizon: f64) -> Self {
        Self {
            dim,
            tau,
            horizon,
            cells: 16,
            control_step: None,
            drift: Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)),
            weight_fn: Arc::new(move |_| vec![0.0; dim]),
            delay: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            delay_sup: 0.0,
            delay_lipschitz: 0.0,
            running_cost: Arc::new(|_, _, _| 0.0),
            terminal_cost: Arc::new(|_| 0.0),
            controls: Vec::new(),
            lipschitz: 1.0,
            weight_hypothesis: true,
        }
    }

    /// Number of grid cells per delay interval; the time step is `tau / cells`.
    pub fn cells(mut self, cells: usize) -> Self {
        self.cells = cells;
        self
    }

    /// Length of one control interval; defaults to the time step.
    pub fn control_step(mut self, step: f64) -> Self {
        self.control_step = Some(step);
        self
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn weight(mut self, a: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.weight_fn = Arc::new(a);
        self
    }

    /// Delay matrix with its declared sup norm and Lipschitz constant in time.
    pub fn delay(mut self, b: impl Fn(f64, &mut [f64]) + Send + Sync + 'static, sup: f64, lipschitz: f64) -> Self {
        self.delay = Arc::new(b);
        self.delay_sup = sup;
        self.delay_lipschitz = lipschitz;
        self
    }

    pub fn running_cost(mut self, q: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.running_cost = Arc::new(q);
        self
    }

    pub fn terminal_cost(mut self, phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_cost = Arc::new(phi);
        self
    }

    pub fn controls(mut self, controls: Vec<Vec<f64>>) -> Self {
        self.controls = controls;
        self
    }

    pub fn lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = l;
        self
    }

    /// Whether to enforce `a(-tau) = 0`.
    pub fn require_weight_vanishing(mut self, on: bool) -> Self {
        self.weight_hypothesis = on;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let bad = |msg: String| Err(Error::InvalidProblem(msg));
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.cells == 0 {
            return bad("cells must be positive".into());
        }
        if self.controls.is_empty() {
            return bad("control set is empty".into());
        }
        if let Some(u) = self.controls.iter().find(|u| u.iter().any(|v| !v.is_finite())) {
            return bad(format!("control point {u:?} is not finite"));
        }
        if !(self.lipschitz.is_finite() && self.lipschitz > 0.0) {
            return bad(format!("Lipschitz constant must be positive, got {}", self.lipschitz));
        }
        let dt = self.tau / self.cells as f64;
        let steps = grid_index("horizon", self.horizon, dt)
            .map_err(|_| Error::InvalidProblem(format!("horizon {} is not a multiple of dt = {dt}", self.horizon)))?;
        if steps == 0 {
            return bad("horizon shorter than one step".into());
        }
        let control_step = self.control_step.unwrap_or(dt);
        let stride = grid_index("control step", control_step, dt)
            .map_err(|_| Error::InvalidProblem(format!("control step {control_step} is not a multiple of dt = {dt}")))?;
        if stride == 0 || steps % stride != 0 {
            return bad(format!("control step {control_step} must divide the horizon {}", self.horizon));
        }
        let weight = Segment::from_fn(self.dim, self.tau, self.cells, |th| (self.weight_fn)(th))
            .map_err(|e| Error::InvalidProblem(format!("weight a: {e}")))?;
        if self.weight_hypothesis && norm(&(self.weight_fn)(-self.tau)) > 1e-12 {
            return bad(format!("weight a(-tau) = {:?} must vanish", (self.weight_fn)(-self.tau)));
        }
        Ok(ProblemSpec {
            dim: self.dim,
            tau: self.tau,
            horizon: self.horizon,
            cells: self.cells,
            control_step: stride as f64 * dt,
            drift: self.drift,
            weight_fn: self.weight_fn,
            weight,
            delay: self.delay,
            delay_sup: self.delay_sup,
            delay_lipschitz: self.delay_lipschitz,
            running_cost: self.running_cost,
            terminal_cost: self.terminal_cost,
            controls: self.controls,
            lipschitz: self.lipschitz,
            weight_hypothesis: self.weight_hypothesis,
        })
    }
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn cells(&self) -> usize {
        self.cells
    }
    pub fn dt(&self) -> f64 {
        self.tau / self.cells as f64
    }
    /// Number of time steps on `[0, T]`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt()).round() as usize
    }
    pub fn control_step(&self) -> f64 {
        self.control_step
    }
    /// Time steps per control interval.
    pub fn stride(&self) -> usize {
        (self.control_step / self.dt()).round() as usize
    }
    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
    pub fn weight(&self) -> &Segment {
        &self.weight
    }
    pub fn delay_sup(&self) -> f64 {
        self.delay_sup
    }
    pub fn delay_lipschitz(&self) -> f64 {
        self.delay_lipschitz
    }
    pub fn weight_hypothesis(&self) -> bool {
        self.weight_hypothesis
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt()
    }

    pub fn step_index(&self, t: f64) -> Result<usize> {
        let n = grid_index("t", t, self.dt())?;
        if n > self.steps() {
            return Err(Error::TimeOrder(format!("t = {t} lies beyond the horizon {}", self.horizon)));
        }
        Ok(n)
    }

    /// Index of a time on the control grid.
    pub fn control_index(&self, t: f64) -> Result<usize> {
        let n = self.step_index(t)?;
        if n % self.stride() != 0 {
            return Err(Error::OffGrid { what: "t (control grid)", value: t, step: self.control_step });
        }
        Ok(n / self.stride())
    }

    /// Control-grid times in `[t, T]`, `t` itself first.
    pub fn control_times_from(&self, t: f64) -> Result<Vec<f64>> {
        let first = self.control_index(t)?;
        let last = self.steps() / self.stride();
        Ok((first..=last).map(|i| self.time(i * self.stride())).collect())
    }

    /// `(first interval, number of intervals)` covering `[t, T]`.
    pub fn control_intervals_from(&self, t: f64) -> Result<(usize, usize)> {
        let n = self.step_index(t)?;
        let stride = self.stride();
        let total = self.steps() / stride;
        let first = n / stride;
        Ok((first, total - first))
    }

    pub fn drift(&self, s: f64, x: &[f64], memory: f64, u: &[f64], out: &mut [f64]) {
        (self.drift)(s, x, memory, u, out)
    }

    pub fn delay_matrix(&self, s: f64) -> Vec<f64> {
        let mut b = vec![0.0; self.dim * self.dim];
        (self.delay)(s, &mut b);
        b
    }

    pub fn running_cost(&self, s: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.running_cost)(s, x, u)
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.terminal_cost)(x)
    }

    /// `F(s, x(0), (a, x)_H, u) + b(s) x(-tau)` for a full segment.
    pub fn velocity(&self, s: f64, x: &Segment, u: &[f64]) -> Result<Vec<f64>> {
        self.check_segment(x)?;
        let memory = self.weight.h_inner(x)?;
        let mut v = vec![0.0; self.dim];
        self.drift(s, x.at_zero(), memory, u, &mut v);
        let b = self.delay_matrix(s);
        let left = x.at_left();
        for (i, vi) in v.iter_mut().enumerate() {
            *vi += dot(&b[i * self.dim..(i + 1) * self.dim], left);
        }
        Ok(v)
    }

    /// Same problem on a grid with `cells` cells per delay interval; the
    /// control step is kept in absolute time.
    pub fn with_cells(&self, cells: usize) -> Result<ProblemSpec> {
        ProblemBuilder {
            dim: self.dim,
            tau: self.tau,
            horizon: self.horizon,
            cells,
            control_step: Some(self.control_step),
            drift: self.drift.clone(),
            weight_fn: self.weight_fn.clone(),
            delay: self.delay.clone(),
            delay_sup: self.delay_sup,
            delay_lipschitz: self.delay_lipschitz,
            running_cost: self.running_cost.clone(),
            terminal_cost: self.terminal_cost.clone(),
            controls: self.controls.clone(),
            lipschitz: self.lipschitz,
            weight_hypothesis: self.weight_hypothesis,
        }
        .build()
    }

    /// Halves the time step.
    pub fn refined(&self) -> Result<ProblemSpec> {
        self.with_cells(self.cells * 2)
    }

    /// Copy with different cost data.
    pub fn with_costs(
        &self,
        q: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> ProblemSpec {
        let mut out = self.clone();
        out.running_cost = Arc::new(q);
        out.terminal_cost = Arc::new(phi);
        out
    }

    /// Copy with a different control set.
    pub fn with_controls(&self, controls: Vec<Vec<f64>>) -> Result<ProblemSpec> {
        if controls.is_empty() {
            return Err(Error::InvalidProblem("control set is empty".into()));
        }
        let mut out = self.clone();
        out.controls = controls;
        Ok(out)
    }

    pub fn check_segment(&self, x: &Segment) -> Result<()> {
        self.weight.ensure_same_grid(x)
    }

    /// Sup norm of `a`, the scale entering the Picard weight.
    pub fn weight_scale(&self) -> f64 {
        self.weight.sup_norm()
    }

    /// Weight `beta` of the Picard norm `sup e^{-beta s} |X(s)|`, large enough
    /// that the fixed-point map contracts with factor at most one half.
    pub fn picard_beta(&self) -> f64 {
        2.0 * (self.lipschitz
            + self.delay_sup
            + self.delay_lipschitz * self.horizon.sqrt()
            + 2.0 * self.lipschitz * self.tau * self.weight_scale())
    }
}

/// Piecewise-constant control: one index into the control set per control
/// interval, starting with the interval that contains `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    start: f64,
    values: Vec<usize>,
}

impl ControlSignal {
    pub fn new(p: &ProblemSpec, start: f64, values: Vec<usize>) -> Result<Self> {
        let (_, count) = p.control_intervals_from(start)?;
        if values.len() != count {
            return Err(Error::InvalidProblem(format!(
                "control signal from t = {start} needs {count} values, got {}",
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| v >= p.controls().len()) {
            return Err(Error::InvalidProblem(format!(
                "control index {bad} outside the control set of size {}",
                p.controls().len()
            )));
        }
        Ok(Self { start, values })
    }

    pub fn constant(p: &ProblemSpec, start: f64, index: usize) -> Result<Self> {
        let (_, count) = p.control_intervals_from(start)?;
        Self::new(p, start, vec![index; count])
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Control index in force on the step starting at absolute step `n`.
    pub fn index_at_step(&self, p: &ProblemSpec, n: usize) -> usize {
        let first = p.step_index(self.start).map(|s| s / p.stride()).unwrap_or(0);
        self.values[n / p.stride() - first]
    }

    /// The same control restricted to `[s, T]`.
    pub fn restrict(&self, p: &ProblemSpec, s: f64) -> Result<ControlSignal> {
        let n0 = p.step_index(self.start)?;
        let n = p.step_index(s)?;
        if n < n0 {
            return Err(Error::TimeOrder(format!("cannot restrict a control from {} to earlier s = {s}", self.start)));
        }
        let skip = n / p.stride() - n0 / p.stride();
        let skip = skip.min(self.values.len());
        Ok(ControlSignal { start: s, values: self.values[skip..].to_vec() })
    }

    /// Control on `[t, T]` that uses `head` (one index per control interval)
    /// up to the start of `tail` and `tail` afterwards.
    pub fn spliced(p: &ProblemSpec, t: f64, head: &[usize], tail: &ControlSignal) -> Result<ControlSignal> {
        let (first, _) = p.control_intervals_from(t)?;
        let (tail_first, _) = p.control_intervals_from(tail.start)?;
        if tail_first != first + head.len() {
            return Err(Error::TimeOrder("control pieces do not abut".into()));
        }
        let mut values = head.to_vec();
        values.extend_from_slice(&tail.values);
        ControlSignal::new(p, t, values)
    }
}

/// A computed solution `X(s)`, `s` in `{t, t + dt, ..., T}`, with its history.
#[derive(Debug, Clone)]
pub struct Trajectory {
    start: f64,
    start_step: usize,
    dt: f64,
    dim: usize,
    history: Segment,
    values: Vec<f64>,
    control: ControlSignal,
}

impl Trajectory {
    pub fn start(&self) -> f64 {
        self.start
    }
    pub fn history(&self) -> &Segment {
        &self.history
    }
    pub fn control(&self) -> &ControlSignal {
        &self.control
    }
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    /// Grid times `t, t + dt, ..., T`.
    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| (self.start_step + i) as f64 * self.dt).collect()
    }
    /// State at the `i`-th grid time after the start.
    pub fn state(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
    pub fn terminal_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
    pub fn state_at(&self, s: f64) -> Result<&[f64]> {
        Ok(self.state(self.offset(s)?))
    }
    /// `sup_s |X(s)|` over the computed grid.
    pub fn sup_norm(&self) -> f64 {
        self.values.chunks_exact(self.dim).map(norm).fold(0.0, f64::max)
    }

    fn offset(&self, s: f64) -> Result<usize> {
        let n = grid_index("s", s, self.dt)?;
        if n < self.start_step || n - self.start_step >= self.len() {
            return Err(Error::TimeOrder(format!(
                "s = {s} outside [{}, {}]",
                self.start,
                (self.start_step + self.len() - 1) as f64 * self.dt
            )));
        }
        Ok(n - self.start_step)
    }

    fn window_value(&self, i: usize, k: usize) -> &[f64] {
        window_value(&self.history, &self.values, self.dim, i, k)
    }

    /// The window `X_s(theta) = X(s + theta)`, taking history values for
    /// `s + theta < t`.
    pub fn segment_at(&self, s: f64) -> Result<Segment> {
        let i = self.offset(s)?;
        let m = self.history.cells();
        let mut values = Vec::with_capacity((m + 1) * self.dim);
        for k in 0..=m {
            values.extend_from_slice(self.window_value(i, k));
        }
        Segment::new(self.dim, self.history.tau(), m, values)
    }
}

fn window_value<'a>(history: &'a Segment, traj: &'a [f64], d: usize, i: usize, k: usize) -> &'a [f64] {
    let m = history.cells();
    if i + k < m {
        history.value(i + k)
    } else {
        let j = i + k - m;
        &traj[j * d..(j + 1) * d]
    }
}

/// `(a, X_{s_i})_H` summed in the same order as [`Segment::h_inner`].
fn window_memory(a: &Segment, history: &Segment, traj: &[f64], d: usize, i: usize) -> f64 {
    let m = history.cells();
    let mut acc = 0.0;
    for k in 0..m {
        let w = window_value(history, traj, d, i, k);
        for (ai, wi) in a.value(k).iter().zip(w) {
            acc += ai * wi;
        }
    }
    acc * history.step()
}

struct Prepared {
    start_step: usize,
    steps: usize,
}

fn prepare(p: &ProblemSpec, t: f64, x: &Segment, u: &ControlSignal) -> Result<Prepared> {
    p.check_segment(x)?;
    let start_step = p.step_index(t)?;
    if (u.start() - t).abs() > 1e-9 * p.dt() {
        return Err(Error::TimeOrder(format!("control starts at {} but the solve starts at {t}", u.start())));
    }
    let (_, count) = p.control_intervals_from(t)?;
    if u.len() != count {
        return Err(Error::InvalidProblem(format!("control has {} intervals, expected {count}", u.len())));
    }
    Ok(Prepared { start_step, steps: p.steps() - start_step })
}

/// Integrand of the state equation at relative step `i` of `traj`.
fn integrand(
    p: &ProblemSpec,
    history: &Segment,
    traj: &[f64],
    start_step: usize,
    i: usize,
    u: &ControlSignal,
    b: &mut [f64],
    out: &mut [f64],
) {
    let d = p.dim();
    let n = start_step + i;
    let s = p.time(n);
    let memory = window_memory(p.weight(), history, traj, d, i);
    let x = &traj[i * d..(i + 1) * d];
    let uval = &p.controls()[u.index_at_step(p, n)];
    p.drift(s, x, memory, uval, out);
    (p.delay)(s, b);
    let delayed = window_value(history, traj, d, i, 0);
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&b[r * d..(r + 1) * d], delayed);
    }
}

fn check_state(p: &ProblemSpec, n: usize, x: &[f64]) -> Result<()> {
    let mag = norm(x);
    if !mag.is_finite() || mag > BLOW_UP_LIMIT {
        return Err(Error::BlowUp { time: p.time(n), magnitude: mag });
    }
    Ok(())
}

/// Explicit Euler on the grid:
/// `X(s_{k+1}) = X(s_k) + dt [F(s_k, X(s_k), (a, X_{s_k})_H, u(s_k)) + b(s_k) X(s_k - tau)]`.
pub fn solve_euler(p: &ProblemSpec, t: f64, x: &Segment, u: &ControlSignal) -> Result<Trajectory> {
    let prep = prepare(p, t, x, u)?;
    let d = p.dim();
    let dt = p.dt();
    let mut traj = Vec::with_capacity((prep.steps + 1) * d);
    traj.extend_from_slice(x.at_zero());
    let mut b = vec![0.0; d * d];
    let mut f = vec![0.0; d];
    for i in 0..prep.steps {
        integrand(p, x, &traj, prep.start_step, i, u, &mut b, &mut f);
        let next: Vec<f64> = (0..d).map(|r| traj[i * d + r] + dt * f[r]).collect();
        check_state(p, prep.start_step + i + 1, &next)?;
        traj.extend_from_slice(&next);
    }
    Ok(Trajectory {
        start: t,
        start_step: prep.start_step,
        dt,
        dim: d,
        history: x.clone(),
        values: traj,
        control: u.clone(),
    })
}

/// Result of the Picard fixed-point iteration.
#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub trajectory: Trajectory,
    /// Weighted gaps `sup_s e^{-beta s} |X^{k+1}(s) - X^k(s)|`, one per iteration.
    pub gaps: Vec<f64>,
    pub beta: f64,
}

impl PicardSolution {
    pub fn iterations(&self) -> usize {
        self.gaps.len()
    }

    /// Largest ratio `g_{k+1} / g_k` over consecutive nonzero gaps.
    pub fn worst_contraction(&self) -> f64 {
        self.gaps
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }
}

/// Iterates `X <- x(0) + int_t^s [F(...) + b X(. - tau)]` from `X == x(0)`
/// with grid integrals, until the `beta`-weighted gap drops below `tol`.
pub fn solve_picard(
    p: &ProblemSpec,
    t: f64,
    x: &Segment,
    u: &ControlSignal,
    tol: f64,
    max_iter: usize,
) -> Result<PicardSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidProblem(format!("tolerance must be positive, got {tol}")));
    }
    let prep = prepare(p, t, x, u)?;
    let d = p.dim();
    let dt = p.dt();
    let beta = p.picard_beta();
    let len = prep.steps + 1;
    let mut current: Vec<f64> = x.at_zero().iter().copied().cycle().take(len * d).collect();
    let mut next = vec![0.0; len * d];
    let mut b = vec![0.0; d * d];
    let mut f = vec![0.0; d];
    let mut gaps = Vec::new();
    for _ in 0..max_iter {
        next[..d].copy_from_slice(x.at_zero());
        for i in 0..prep.steps {
            integrand(p, x, &current, prep.start_step, i, u, &mut b, &mut f);
            for r in 0..d {
                next[(i + 1) * d + r] = next[i * d + r] + dt * f[r];
            }
            check_state(p, prep.start_step + i + 1, &next[(i + 1) * d..(i + 2) * d])?;
        }
        let gap = (0..len)
            .map(|i| {
                let s = p.time(prep.start_step + i);
                let diff: Vec<f64> = (0..d).map(|r| next[i * d + r] - current[i * d + r]).collect();
                (-beta * s).exp() * norm(&diff)
            })
            .fold(0.0, f64::max);
        gaps.push(gap);
        std::mem::swap(&mut current, &mut next);
        if gap <= tol {
            return Ok(PicardSolution {
                trajectory: Trajectory {
                    start: t,
                    start_step: prep.start_step,
                    dt,
                    dim: d,
                    history: x.clone(),
                    values: current,
                    control: u.clone(),
                },
                gaps,
                beta,
            });
        }
    }
    Err(Error::NotConverged { iterations: max_iter, gap: gaps.last().copied().unwrap_or(f64::INFINITY) })
}

/// Window `X_s` of a trajectory.
pub fn segment_at(tr: &Trajectory, s: f64) -> Result<Segment> {
    tr.segment_at(s)
}

/// The sampled control family used by the estimate reports: every constant
/// control plus one that cycles through the control set.
pub fn sampled_controls(p: &ProblemSpec, t: f64) -> Result<Vec<ControlSignal>> {
    let (_, count) = p.control_intervals_from(t)?;
    let n = p.controls().len();
    let mut out: Vec<ControlSignal> = (0..n).map(|i| ControlSignal::constant(p, t, i)).collect::<Result<_>>()?;
    if n > 1 {
        out.push(ControlSignal::new(p, t, (0..count).map(|k| k % n).collect())?);
    }
    Ok(out)
}

/// Largest ratio `lhs / factor`; a positive `lhs` against a vanishing factor
/// gives infinity.
pub(crate) fn fit_ratio(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().fold(0.0, |acc, (lhs, factor)| {
        if factor > 0.0 {
            acc.max(lhs / factor)
        } else if lhs > 1e-12 {
            f64::INFINITY
        } else {
            acc
        }
    })
}

/// Both fits finite and within a factor two of each other.
pub fn refinement_stable(coarse: f64, fine: f64) -> bool {
    if !(coarse.is_finite() && fine.is_finite()) {
        return false;
    }
    let (lo, hi) = if coarse <= fine { (coarse, fine) } else { (fine, coarse) };
    if hi == 0.0 {
        return true;
    }
    lo > 0.0 && hi / lo < 2.0
}

#[derive(Debug, Clone)]
pub struct GrowthSample {
    pub t: f64,
    pub x: Segment,
    pub control: ControlSignal,
}

#[derive(Debug, Clone)]
pub struct GrowthReport {
    /// `sup |X| / (1 + |x(0)| + |x|_H)` per sample.
    pub ratios: Vec<f64>,
    pub fitted: f64,
    pub refined_fitted: f64,
    pub stable: bool,
}

/// Fits the growth constant `sup_s |X(s)| <= C (1 + |x(0)| + |x|_H)` at the
/// problem's step and at half of it.
pub fn growth_bound_report(p: &ProblemSpec, samples: &[GrowthSample]) -> Result<GrowthReport> {
    if samples.is_empty() {
        return Err(Error::InvalidProblem("growth report needs at least one sample".into()));
    }
    let run = |p: &ProblemSpec, refine: usize| -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|smp| {
                let x = smp.x.refined(refine);
                let tr = solve_euler(p, smp.t, &x, &smp.control)?;
                Ok(tr.sup_norm() / (1.0 + norm(x.at_zero()) + x.h_norm()))
            })
            .collect()
    };
    let ratios = run(p, 1)?;
    let fine = run(&p.refined()?, 2)?;
    let fitted = ratios.iter().copied().fold(0.0, f64::max);
    let refined_fitted = fine.iter().copied().fold(0.0, f64::max);
    Ok(GrowthReport { ratios, fitted, refined_fitted, stable: refinement_stable(fitted, refined_fitted) })
}

/// One comparison between two initial data.
#[derive(Debug, Clone)]
pub struct InitialPair {
    pub t1: f64,
    pub x1: Segment,
    pub t2: f64,
    pub x2: Segment,
}

impl InitialPair {
    pub fn new(t1: f64, x1: Segment, t2: f64, x2: Segment) -> Self {
        Self { t1, x1, t2, x2 }
    }

    /// `1 + |x1(0)| + |x2(0)| + |x1|_H + |x2|_H`.
    pub fn size_factor(&self) -> f64 {
        1.0 + norm(self.x1.at_zero()) + norm(self.x2.at_zero()) + self.x1.h_norm() + self.x2.h_norm()
    }

    /// `|x1(0) - x2(0)| + |t2 - t1|^{1/2} + sup_l |int_l^0 (x1 - x2)|`.
    pub fn mixed_distance(&self) -> Result<f64> {
        let diff = self.x1.sub(&self.x2)?;
        Ok(norm(diff.at_zero()) + (self.t2 - self.t1).abs().sqrt() + diff.tail_integral_sup())
    }

    /// `|x1(0) - x2(0)| + |x1 - x2|_H`.
    pub fn h_distance(&self) -> Result<f64> {
        let diff = self.x1.sub(&self.x2)?;
        Ok(norm(diff.at_zero()) + diff.h_norm())
    }

    pub fn same_time(&self) -> bool {
        (self.t1 - self.t2).abs() < 1e-12
    }

    fn refined(&self, factor: usize) -> InitialPair {
        InitialPair::new(self.t1, self.x1.refined(factor), self.t2, self.x2.refined(factor))
    }
}

#[derive(Debug, Clone)]
pub struct ContinuityReport {
    /// Largest `sup_s |X1(s) - X2(s)|` seen.
    pub max_gap: f64,
    /// Fitted constant of the mixed time/state estimate.
    pub mixed: f64,
    pub refined_mixed: f64,
    /// Fitted constant of the same-time estimate, if any pair has `t1 = t2`.
    pub same_time: Option<f64>,
    pub refined_same_time: Option<f64>,
    pub stable: bool,
}

struct ContinuityFit {
    max_gap: f64,
    mixed: f64,
    same_time: Option<f64>,
}

fn continuity_fit(p: &ProblemSpec, pairs: &[InitialPair]) -> Result<ContinuityFit> {
    let mut mixed = Vec::new();
    let mut same = Vec::new();
    let mut max_gap: f64 = 0.0;
    for pair in pairs {
        let (t_lo, t_hi) = if pair.t1 <= pair.t2 { (pair.t1, pair.t2) } else { (pair.t2, pair.t1) };
        let lo_grid = p.control_intervals_from(t_lo)?;
        let _ = lo_grid;
        let mut lhs: f64 = 0.0;
        for u in sampled_controls(p, t_lo)? {
            let u1 = u.restrict(p, pair.t1)?;
            let u2 = u.restrict(p, pair.t2)?;
            let tr1 = solve_euler(p, pair.t1, &pair.x1, &u1)?;
            let tr2 = solve_euler(p, pair.t2, &pair.x2, &u2)?;
            let n0 = p.step_index(t_hi)?;
            for n in n0..=p.steps() {
                let s = p.time(n);
                let a = tr1.state_at(s)?;
                let b = tr2.state_at(s)?;
                let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                lhs = lhs.max(norm(&diff));
            }
        }
        max_gap = max_gap.max(lhs);
        mixed.push((lhs, pair.size_factor() * pair.mixed_distance()?));
        if pair.same_time() {
            same.push((lhs, pair.h_distance()?));
        }
    }
    Ok(ContinuityFit {
        max_gap,
        mixed: fit_ratio(mixed),
        same_time: if same.is_empty() { None } else { Some(fit_ratio(same)) },
    })
}

/// Fits the constants of the trajectory continuity estimates
///
/// ```text
/// sup |X(s,t1,x1) - X(s,t2,x2)| <= C3 (1 + |x1(0)| + |x2(0)| + |x1|_H + |x2|_H)
///                                    (|x1(0)-x2(0)| + |t2-t1|^{1/2} + sup_l |int_l^0 (x1-x2)|)
/// sup |X(s,t,x1) - X(s,t,x2)|     <= C4 (|x1(0)-x2(0)| + |x1-x2|_H)
/// ```
///
/// over the sampled control family, at the problem's step and at half of it.
pub fn continuity_report(p: &ProblemSpec, pairs: &[InitialPair]) -> Result<ContinuityReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidProblem("continuity report needs at least one pair".into()));
    }
    let coarse = continuity_fit(p, pairs)?;
    let fine_pairs: Vec<InitialPair> = pairs.iter().map(|q| q.refined(2)).collect();
    let fine = continuity_fit(&p.refined()?, &fine_pairs)?;
    let mut stable = refinement_stable(coarse.mixed, fine.mixed);
    if let (Some(a), Some(b)) = (coarse.same_time, fine.same_time) {
        stable &= refinement_stable(a, b);
    }
    Ok(ContinuityReport {
        max_gap: coarse.max_gap,
        mixed: coarse.mixed,
        refined_mixed: fine.mixed,
        same_time: coarse.same_time,
        refined_same_time: fine.same_time,
        stable,
    })
}
