//! Doubling-of-variables machinery: the penalty distance, the auxiliary
//! functional `Psi`, the left maximization procedure over a finite candidate
//! set, and the penalty diagnostics as `alpha` grows.

use rayon::prelude::*;

use crate::control::{hamiltonian, GradientAtZero};
use crate::dynamics::{sampled_controls, solve_euler, ProblemSpec};
use crate::error::{Error, Result};
use crate::generator::{lattice_points, Functional};
use crate::segment::{dot, norm, Segment, TimedSegment};

/// Constants of the doubling argument for one penalty weight `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoublingConfig {
    pub alpha: f64,
    pub epsilon: f64,
    /// The `epsilon` asked for, before clamping.
    pub requested_epsilon: f64,
    pub clamped: bool,
    pub mu: f64,
    pub c_bar: f64,
    pub a_bar: f64,
    pub delta: f64,
    pub c: f64,
    pub horizon: f64,
}

/// `|a|_{W^{1,2}}` of the grid weight, with `a'` from cell differences.
fn weight_sobolev_norm(a: &Segment) -> f64 {
    let mut deriv = 0.0;
    for k in 0..a.cells() {
        let diff: Vec<f64> = a.value(k + 1).iter().zip(a.value(k)).map(|(r, l)| r - l).collect();
        deriv += dot(&diff, &diff) / a.step();
    }
    (a.h_norm_sq() + deriv).sqrt()
}

impl DoublingConfig {
    /// Derives `mu`, `C_bar`, `a_bar` and `c = delta / T^2` from the problem,
    /// and clamps `epsilon` so that `9 L^2 eps / (8 mu T (1+L)^2) <= c / 2`.
    pub fn new(p: &ProblemSpec, alpha: f64, epsilon: f64, delta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("epsilon", epsilon), ("delta", delta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidProblem(format!("{name} must be positive, got {v}")));
            }
        }
        let horizon = p.horizon();
        let l = p.lipschitz();
        let c_bar = 1.0 + p.tau() * weight_sobolev_norm(p.weight()) + p.delay_sup();
        let lc = (1.0 + l) * (1.0 + l) * c_bar * c_bar;
        let mu = 1.0 + 1.0 / (4.0 * horizon * lc);
        let a_bar = (1.0 / (8.0 * lc)).min(p.tau() / 2.0);
        let c = delta / (horizon * horizon);
        let cap = c * 4.0 * mu * horizon * (1.0 + l) * (1.0 + l) / (9.0 * l * l);
        let clamped = epsilon > cap;
        Ok(Self {
            alpha,
            epsilon: epsilon.min(cap),
            requested_epsilon: epsilon,
            clamped,
            mu,
            c_bar,
            a_bar,
            delta,
            c,
            horizon,
        })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidProblem(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha, ..self.clone() })
    }

    /// `(mu T - t) / (mu T)`.
    pub fn time_weight(&self, t: f64) -> f64 {
        (self.mu * self.horizon - t) / (self.mu * self.horizon)
    }
}

/// A point `(t, x, s, y)` of the doubled space.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadPoint {
    pub t: f64,
    pub x: Segment,
    pub s: f64,
    pub y: Segment,
}

impl QuadPoint {
    pub fn new(t: f64, x: Segment, s: f64, y: Segment) -> Result<Self> {
        x.ensure_same_grid(&y)?;
        for v in [t, s] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::TimeOrder(format!("time must be nonnegative, got {v}")));
            }
        }
        Ok(Self { t, x, s, y })
    }

    pub fn diagonal(t: f64, x: Segment) -> Self {
        Self { t, s: t, y: x.clone(), x }
    }

    pub fn x_side(&self) -> TimedSegment {
        TimedSegment { time: self.t, segment: self.x.clone() }
    }

    pub fn y_side(&self) -> TimedSegment {
        TimedSegment { time: self.s, segment: self.y.clone() }
    }

    fn from_sides(x: &TimedSegment, y: &TimedSegment) -> Self {
        Self { t: x.time, x: x.segment.clone(), s: y.time, y: y.segment.clone() }
    }
}

/// `d = |x(0) - y(0)|^2 + |x - y|_B^2 + |s - t|^2`.
pub fn doubling_distance(pt: &QuadPoint) -> Result<f64> {
    let diff = pt.x.sub(&pt.y)?;
    let d0 = norm(diff.at_zero());
    Ok(d0 * d0 + diff.b_norm_sq() + (pt.s - pt.t).powi(2))
}

/// `eps ((mu T - t)/(mu T)) (|x|_H^2 + |x(0)|^2)`.
fn growth_penalty(cfg: &DoublingConfig, t: f64, x: &Segment) -> f64 {
    let x0 = norm(x.at_zero());
    cfg.epsilon * cfg.time_weight(t) * (x.h_norm_sq() + x0 * x0)
}

fn psi_from_parts(cfg: &DoublingConfig, w: f64, v: f64, pt: &QuadPoint) -> Result<f64> {
    let out = w - v - 0.5 * cfg.alpha * doubling_distance(pt)? - growth_penalty(cfg, pt.t, &pt.x) - growth_penalty(cfg, pt.s, &pt.y);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite(format!("Psi at t = {}, s = {}", pt.t, pt.s)))
    }
}

/// `Psi = W(t,x) - V(s,y) - (alpha/2) d - eps ((mu T - t)/(mu T))(|x|_H^2 + |x(0)|^2)
///        - eps ((mu T - s)/(mu T))(|y|_H^2 + |y(0)|^2)`.
pub fn psi(w: &Functional<'_>, v: &Functional<'_>, cfg: &DoublingConfig, pt: &QuadPoint) -> Result<f64> {
    psi_from_parts(cfg, w(pt.t, &pt.x)?, v(pt.s, &pt.y)?, pt)
}

/// `W(t, x) - delta / t`, defined for `t > 0`.
pub fn strict_wrapper<'a>(w: &'a Functional<'a>, delta: f64) -> impl Fn(f64, &Segment) -> Result<f64> + Sync + 'a {
    move |t, x| {
        if t <= 0.0 {
            return Err(Error::NonFinite(format!("strict wrapper undefined at t = {t}")));
        }
        Ok(w(t, x)? - delta / t)
    }
}

/// Segment family from which candidate extensions are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFamily {
    /// Radius `M` of the ball `Q`; candidates stay in its closure.
    pub radius: f64,
    /// Spacing of the present-value jumps and constant heads.
    pub lattice_step: f64,
    /// Additional present values offered as same-time jumps.
    pub extra_jumps: Vec<Vec<f64>>,
    /// Later times are taken every `time_stride` control steps.
    pub time_stride: usize,
    pub constants: bool,
    pub trajectories: bool,
}

impl Default for CandidateFamily {
    fn default() -> Self {
        Self {
            radius: 2.0,
            lattice_step: 0.5,
            extra_jumps: Vec::new(),
            time_stride: 1,
            constants: true,
            trajectories: true,
        }
    }
}

/// The points `start ⊗ (t, h)` for one side of the doubled space; entry 0 is
/// the start itself.
fn side_options(p: &ProblemSpec, start: &TimedSegment, family: &CandidateFamily) -> Result<Vec<TimedSegment>> {
    let z = &start.segment;
    let in_q = |x: &Segment| x.sup_norm() <= family.radius + 1e-12;
    let mut out = vec![start.clone()];
    let mut jumps = lattice_points(p.dim(), family.radius, family.lattice_step);
    jumps.extend(family.extra_jumps.iter().filter(|v| norm(v) <= family.radius + 1e-12).cloned());
    for c in &jumps {
        if c.as_slice() == z.at_zero() {
            continue;
        }
        let jumped = TimedSegment { time: start.time, segment: z.with_present(c)? };
        if in_q(&jumped.segment) && !out.contains(&jumped) {
            out.push(jumped);
        }
    }
    let n0 = p.step_index(start.time)?;
    let stride = p.stride() * family.time_stride.max(1);
    let later: Vec<usize> = (n0 / stride + 1..=p.steps() / stride).map(|i| i * stride).collect();
    let trajectories = if family.trajectories {
        sampled_controls(p, start.time)?
            .iter()
            .map(|u| solve_euler(p, start.time, z, u))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let constants = if family.constants { lattice_points(p.dim(), family.radius, family.lattice_step) } else { Vec::new() };
    for &n in &later {
        let t = p.time(n);
        for c in &constants {
            let head = TimedSegment { time: t, segment: Segment::constant(z.tau(), z.cells(), c)? };
            let ext = start.concat(&head)?;
            if in_q(&ext.segment) && !out.contains(&ext) {
                out.push(ext);
            }
        }
        for tr in &trajectories {
            let ext = TimedSegment { time: t, segment: tr.segment_at(t)? };
            if in_q(&ext.segment) && !out.contains(&ext) {
                out.push(ext);
            }
        }
    }
    Ok(out)
}

/// The finite candidate universe `{start ⊗ (t, x, s, y)}` as a product of
/// per-side options. Index 0 on each side is the start.
#[derive(Debug, Clone)]
pub struct QuadCandidates {
    pub x_side: Vec<TimedSegment>,
    pub y_side: Vec<TimedSegment>,
}

impl QuadCandidates {
    /// Splices each head onto the matching side of `start`.
    pub fn from_heads(start: &QuadPoint, x_heads: &[TimedSegment], y_heads: &[TimedSegment]) -> Result<Self> {
        let (sx, sy) = (start.x_side(), start.y_side());
        let mut x_side = vec![sx.clone()];
        for h in x_heads {
            x_side.push(sx.concat(h)?);
        }
        let mut y_side = vec![sy.clone()];
        for h in y_heads {
            y_side.push(sy.concat(h)?);
        }
        if x_side.len() + y_side.len() == 2 {
            return Err(Error::EmptyCandidates);
        }
        Ok(Self { x_side, y_side })
    }

    /// Jumps, constant heads and trajectory windows on each side, kept inside
    /// the closed ball of radius `M`.
    pub fn generate(p: &ProblemSpec, start: &QuadPoint, family: &CandidateFamily) -> Result<Self> {
        for z in [&start.x, &start.y] {
            p.check_segment(z)?;
            if z.sup_norm() > family.radius + 1e-12 {
                return Err(Error::InvalidProblem(format!("start segment leaves the ball of radius {}", family.radius)));
            }
        }
        let x_side = side_options(p, &start.x_side(), family)?;
        let y_side = if start.x_side() == start.y_side() {
            x_side.clone()
        } else {
            side_options(p, &start.y_side(), family)?
        };
        if x_side.len() + y_side.len() == 2 {
            return Err(Error::EmptyCandidates);
        }
        Ok(Self { x_side, y_side })
    }

    pub fn len(&self) -> usize {
        self.x_side.len() * self.y_side.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize, j: usize) -> QuadPoint {
        QuadPoint::from_sides(&self.x_side[i], &self.y_side[j])
    }
}

#[derive(Debug, Clone)]
pub struct LeftMaxResult {
    pub point: QuadPoint,
    pub value: f64,
    /// `(m_i, m_bar_i)` per iteration.
    pub log: Vec<(f64, f64)>,
}

impl LeftMaxResult {
    pub fn iterations(&self) -> usize {
        self.log.len()
    }

    /// Largest ratio of consecutive gaps `m_bar_i - m_i`.
    pub fn worst_contraction(&self) -> f64 {
        self.log
            .windows(2)
            .filter(|w| w[0].1 - w[0].0 > 0.0)
            .map(|w| (w[1].1 - w[1].0) / (w[0].1 - w[0].0))
            .fold(0.0, f64::max)
    }
}

/// Extension relation on one side: `rel[i * n + j]` iff option `j` extends
/// option `i`.
fn extension_table(side: &[TimedSegment]) -> Vec<bool> {
    let n = side.len();
    (0..n * n).into_par_iter().map(|k| side[k / n].is_extended_by(&side[k % n])).collect()
}

/// Runs the left maximization iteration on precomputed values
/// `values[i * ny + j] = v(x_side[i], y_side[j])`.
fn left_maximize_table(cands: &QuadCandidates, values: &[f64], tol: f64) -> Result<LeftMaxResult> {
    let (nx, ny) = (cands.x_side.len(), cands.y_side.len());
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("functional at candidate {k}")));
    }
    let ext_x = extension_table(&cands.x_side);
    let ext_y = extension_table(&cands.y_side);
    let mut order: Vec<(usize, usize)> = (0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| {
        let ka = (cands.x_side[a.0].time, cands.y_side[a.1].time);
        let kb = (cands.x_side[b.0].time, cands.y_side[b.1].time);
        ka.partial_cmp(&kb).unwrap().then(a.cmp(b))
    });
    let (mut ci, mut cj) = (0usize, 0usize);
    let mut log = Vec::new();
    loop {
        let m = values[ci * ny + cj];
        let reachable = |&&(i, j): &&(usize, usize)| ext_x[ci * nx + i] && ext_y[cj * ny + j];
        let m_bar = order.iter().filter(reachable).map(|&(i, j)| values[i * ny + j]).fold(f64::NEG_INFINITY, f64::max);
        log.push((m, m_bar));
        if m_bar - m <= tol {
            break;
        }
        let target = 0.5 * (m + m_bar);
        let &(ni, nj) = order
            .iter()
            .filter(reachable)
            .find(|&&(i, j)| values[i * ny + j] >= target)
            .expect("the maximizer itself meets the target");
        ci = ni;
        cj = nj;
    }
    Ok(LeftMaxResult { point: cands.point(ci, cj), value: values[ci * ny + cj], log })
}

/// Functional on the doubled space.
pub type QuadFunctional<'a> = dyn Fn(&QuadPoint) -> Result<f64> + Sync + 'a;

/// Moves from `start` to a point of the candidate universe whose value is
/// within `tol` of the best value over its own sampled extensions. Each step
/// jumps to the first extension (times ascending, then option index) that
/// reaches the midpoint between the current value and the current sup.
pub fn left_maximize(v: &QuadFunctional<'_>, start: &QuadPoint, cands: &QuadCandidates, tol: f64) -> Result<LeftMaxResult> {
    if cands.x_side.is_empty() || cands.y_side.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if cands.x_side[0] != start.x_side() || cands.y_side[0] != start.y_side() {
        return Err(Error::InvalidProblem("candidate universe is not rooted at the start point".into()));
    }
    let ny = cands.y_side.len();
    let values = (0..cands.len())
        .into_par_iter()
        .map(|k| v(&cands.point(k / ny, k % ny)))
        .collect::<Result<Vec<f64>>>()?;
    left_maximize_table(cands, &values, tol)
}

/// Diagnostics at one penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaDiagnostics {
    pub alpha: f64,
    pub half_alpha_d: f64,
    /// `alpha |b(t^) x^(-tau) - b(s^) y^(-tau)|^2`.
    pub alpha_b_gap_sq: f64,
    pub t_hat: f64,
    pub s_hat: f64,
    pub x0_hat: Vec<f64>,
    pub y0_hat: Vec<f64>,
    pub interior: bool,
    /// `H(t^, x^, p_x) - H(s^, y^, p_y)` with the penalty gradients.
    pub hamiltonian_gap: f64,
    pub psi: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub config: DoublingConfig,
    pub rows: Vec<AlphaDiagnostics>,
    pub penalty_converged: bool,
    pub delay_converged: bool,
    /// First `alpha` from which every maximizer is interior.
    pub interior_from: Option<f64>,
    pub candidates: usize,
}

impl ComparisonReport {
    pub fn converged(&self) -> bool {
        self.penalty_converged && self.delay_converged
    }
}

/// Nonincreasing over the last three entries and the last entry at most a
/// tenth of the first; an identically zero sequence qualifies.
pub fn decays(seq: &[f64]) -> bool {
    if seq.len() < 3 {
        return false;
    }
    let tail = &seq[seq.len() - 3..];
    let monotone = tail.windows(2).all(|w| w[1] <= w[0]);
    let (first, last) = (seq[0], seq[seq.len() - 1]);
    monotone && (last <= 0.1 * first || (first == 0.0 && last == 0.0))
}

fn delay_gap_sq(p: &ProblemSpec, pt: &QuadPoint) -> f64 {
    let d = p.dim();
    let (bx, by) = (p.delay_matrix(pt.t), p.delay_matrix(pt.s));
    let diff: Vec<f64> = (0..d)
        .map(|r| dot(&bx[r * d..(r + 1) * d], pt.x.at_left()) - dot(&by[r * d..(r + 1) * d], pt.y.at_left()))
        .collect();
    dot(&diff, &diff)
}

/// Runs left maximization of `Psi` from the diagonal point `(t~, x~, t~, x~)`
/// for each `alpha` and records where the maximizer lands.
pub fn comparison_diagnostics(
    p: &ProblemSpec,
    w: &Functional<'_>,
    v: &Functional<'_>,
    base: &DoublingConfig,
    alphas: &[f64],
    start: &QuadPoint,
    family: &CandidateFamily,
    tol: f64,
) -> Result<ComparisonReport> {
    if alphas.is_empty() {
        return Err(Error::InvalidProblem("empty alpha schedule".into()));
    }
    if alphas.windows(2).any(|a| a[1] <= a[0]) {
        return Err(Error::InvalidProblem(format!("alpha schedule must increase: {alphas:?}")));
    }
    let cands = QuadCandidates::generate(p, start, family)?;
    let w_vals = cands.x_side.par_iter().map(|o| w(o.time, &o.segment)).collect::<Result<Vec<f64>>>()?;
    let v_vals = cands.y_side.par_iter().map(|o| v(o.time, &o.segment)).collect::<Result<Vec<f64>>>()?;
    let ny = cands.y_side.len();
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = base.with_alpha(alpha)?;
        let values = (0..cands.len())
            .into_par_iter()
            .map(|k| psi_from_parts(&cfg, w_vals[k / ny], v_vals[k % ny], &cands.point(k / ny, k % ny)))
            .collect::<Result<Vec<f64>>>()?;
        let res = left_maximize_table(&cands, &values, tol)?;
        let pt = &res.point;
        let d = doubling_distance(pt)?;
        let (x0, y0) = (pt.x.at_zero(), pt.y.at_zero());
        let interior = pt.t < p.horizon() - 1e-12
            && pt.s < p.horizon() - 1e-12
            && norm(x0) < family.radius
            && norm(y0) < family.radius;
        let hamiltonian_gap = if pt.t < p.horizon() - 1e-12 && pt.s < p.horizon() - 1e-12 {
            let px: Vec<f64> =
                x0.iter().zip(y0).map(|(a, b)| alpha * (a - b) + 2.0 * cfg.epsilon * cfg.time_weight(pt.t) * a).collect();
            let py: Vec<f64> =
                x0.iter().zip(y0).map(|(a, b)| alpha * (a - b) - 2.0 * cfg.epsilon * cfg.time_weight(pt.s) * b).collect();
            hamiltonian(p, pt.t, &pt.x, &GradientAtZero::new(px)?)?.value
                - hamiltonian(p, pt.s, &pt.y, &GradientAtZero::new(py)?)?.value
        } else {
            f64::NAN
        };
        rows.push(AlphaDiagnostics {
            alpha,
            half_alpha_d: 0.5 * alpha * d,
            alpha_b_gap_sq: alpha * delay_gap_sq(p, pt),
            t_hat: pt.t,
            s_hat: pt.s,
            x0_hat: x0.to_vec(),
            y0_hat: y0.to_vec(),
            interior,
            hamiltonian_gap,
            psi: res.value,
            iterations: res.iterations(),
        });
    }
    let penalty: Vec<f64> = rows.iter().map(|r| r.half_alpha_d).collect();
    let delay: Vec<f64> = rows.iter().map(|r| r.alpha_b_gap_sq).collect();
    let interior_from = (0..rows.len()).find(|&i| rows[i..].iter().all(|r| r.interior)).map(|i| rows[i].alpha);
    Ok(ComparisonReport {
        config: base.clone(),
        penalty_converged: decays(&penalty),
        delay_converged: decays(&delay),
        interior_from,
        rows,
        candidates: cands.len(),
    })
}
