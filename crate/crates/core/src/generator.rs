//! The generator `S(f)(x) = lim_{h -> 0+} [f(x^_h) - f(x)] / h` along the
//! hold-constant extension, smooth test functions, HJB residuals and sampled
//! viscosity certificates.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::control::{hamiltonian, GradientAtZero};
use crate::dynamics::{sampled_controls, solve_euler, ProblemSpec};
use crate::error::{Error, Result};
use crate::segment::{norm, Segment, TimedSegment};

type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type TimeRadialFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type PresentFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type PresentGradFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
type FullFn = Arc<dyn Fn(f64, &[f64], &Segment) -> f64 + Send + Sync>;
type FullGradFn = Arc<dyn Fn(f64, &[f64], &Segment) -> Vec<f64> + Send + Sync>;

/// One structural piece of a test function `phi(t, x) = phi0(t, x(0), x)`.
#[derive(Clone)]
pub enum Term {
    /// `g(t, x(0))`; the generator vanishes.
    PresentValue { value: PresentFn, time_derivative: PresentFn, gradient: PresentGradFn },
    /// `g0(t, |x|_H^2)` with `g0_r = d g0 / dr` and `g0_t = d g0 / dt`.
    HType { g0: TimeRadialFn, g0_r: TimeRadialFn, g0_t: TimeRadialFn },
    /// `psi(|x - center|_B^2)`.
    BType { psi: TimeFn, psi_prime: TimeFn, center: Segment },
    /// `l(t)`.
    TimeOnly { l: TimeFn, l_prime: TimeFn },
    /// A general evaluator; the generator is taken by finite differences.
    Custom { value: FullFn, time_derivative: FullFn, gradient: FullGradFn },
}

impl fmt::Debug for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::PresentValue { .. } => f.write_str("PresentValue"),
            Term::HType { .. } => f.write_str("HType"),
            Term::BType { center, .. } => f.debug_struct("BType").field("center", center).finish(),
            Term::TimeOnly { .. } => f.write_str("TimeOnly"),
            Term::Custom { .. } => f.write_str("Custom"),
        }
    }
}

impl Term {
    fn value(&self, t: f64, x: &Segment) -> Result<f64> {
        Ok(match self {
            Term::PresentValue { value, .. } => value(t, x.at_zero()),
            Term::HType { g0, .. } => g0(t, x.h_norm_sq()),
            Term::BType { psi, center, .. } => psi(x.sub(center)?.b_norm_sq()),
            Term::TimeOnly { l, .. } => l(t),
            Term::Custom { value, .. } => value(t, x.at_zero(), x),
        })
    }

    fn time_derivative(&self, t: f64, x: &Segment) -> f64 {
        match self {
            Term::PresentValue { time_derivative, .. } => time_derivative(t, x.at_zero()),
            Term::HType { g0_t, .. } => g0_t(t, x.h_norm_sq()),
            Term::BType { .. } => 0.0,
            Term::TimeOnly { l_prime, .. } => l_prime(t),
            Term::Custom { time_derivative, .. } => time_derivative(t, x.at_zero(), x),
        }
    }

    fn gradient(&self, t: f64, x: &Segment) -> Vec<f64> {
        match self {
            Term::PresentValue { gradient, .. } => gradient(t, x.at_zero()),
            Term::Custom { gradient, .. } => gradient(t, x.at_zero(), x),
            _ => vec![0.0; x.dim()],
        }
    }

    fn generator(&self, t: f64, x: &Segment) -> Result<f64> {
        match self {
            Term::PresentValue { .. } | Term::TimeOnly { .. } => Ok(0.0),
            Term::HType { g0_r, .. } => Ok(s_closed_h(|r| g0_r(t, r), t, x)),
            Term::BType { psi_prime, center, .. } => s_closed_b(|r| psi_prime(r), x, center),
            Term::Custom { value, .. } => {
                let f = |y: &Segment| Ok(value(t, y.at_zero(), y));
                Ok(s_finite_difference(f, x, &default_schedule(x))?.estimate)
            }
        }
    }
}

/// A test function: a weighted sum of structural terms.
#[derive(Debug, Clone, Default)]
pub struct TestFunction {
    terms: Vec<(f64, Term)>,
}

impl TestFunction {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, weight: f64, term: Term) -> Self {
        self.terms.push((weight, term));
        self
    }

    pub fn present_value(
        self,
        value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        time_derivative: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.with(
            1.0,
            Term::PresentValue {
                value: Arc::new(value),
                time_derivative: Arc::new(time_derivative),
                gradient: Arc::new(gradient),
            },
        )
    }

    pub fn h_type(
        self,
        g0: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        g0_r: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        g0_t: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.with(1.0, Term::HType { g0: Arc::new(g0), g0_r: Arc::new(g0_r), g0_t: Arc::new(g0_t) })
    }

    pub fn b_type(
        self,
        psi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        psi_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
        center: Segment,
    ) -> Self {
        self.with(1.0, Term::BType { psi: Arc::new(psi), psi_prime: Arc::new(psi_prime), center })
    }

    pub fn time_only(
        self,
        l: impl Fn(f64) -> f64 + Send + Sync + 'static,
        l_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.with(1.0, Term::TimeOnly { l: Arc::new(l), l_prime: Arc::new(l_prime) })
    }

    pub fn custom(
        self,
        value: impl Fn(f64, &[f64], &Segment) -> f64 + Send + Sync + 'static,
        time_derivative: impl Fn(f64, &[f64], &Segment) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(f64, &[f64], &Segment) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.with(
            1.0,
            Term::Custom {
                value: Arc::new(value),
                time_derivative: Arc::new(time_derivative),
                gradient: Arc::new(gradient),
            },
        )
    }

    /// `c * phi`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { terms: self.terms.iter().map(|(w, term)| (c * w, term.clone())).collect() }
    }

    pub fn terms(&self) -> &[(f64, Term)] {
        &self.terms
    }

    pub fn value(&self, t: f64, x: &Segment) -> Result<f64> {
        let mut acc = 0.0;
        for (w, term) in &self.terms {
            acc += w * term.value(t, x)?;
        }
        finite("test function", acc)
    }

    pub fn time_derivative(&self, t: f64, x: &Segment) -> Result<f64> {
        finite("time derivative", self.terms.iter().map(|(w, term)| w * term.time_derivative(t, x)).sum())
    }

    /// `nabla_{x(0)} phi0(t, x(0), x)`.
    pub fn gradient_at_zero(&self, t: f64, x: &Segment) -> Result<GradientAtZero> {
        let mut g = vec![0.0; x.dim()];
        for (w, term) in &self.terms {
            for (gi, ti) in g.iter_mut().zip(term.gradient(t, x)) {
                *gi += w * ti;
            }
        }
        GradientAtZero::new(g)
    }

    /// `S(phi)(t, x)`, closed form where the structure allows.
    pub fn generator(&self, t: f64, x: &Segment) -> Result<f64> {
        let mut acc = 0.0;
        for (w, term) in &self.terms {
            acc += w * term.generator(t, x)?;
        }
        finite("generator", acc)
    }
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}

/// `{tau/8, tau/16, tau/32, tau/64}`, cut to steps the grid resolves.
pub fn default_schedule(x: &Segment) -> Vec<f64> {
    let mut hs: Vec<f64> = [8usize, 16, 32, 64]
        .iter()
        .filter(|&&k| x.cells() % k == 0)
        .map(|&k| x.tau() / k as f64)
        .collect();
    if hs.len() < 2 {
        hs = vec![2.0 * x.step(), x.step()];
        if x.cells() < 2 {
            hs = vec![x.step()];
        }
    }
    hs
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifference {
    pub steps: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Richardson extrapolation of the last two quotients, assuming first
    /// order; the last quotient if only one is available.
    pub estimate: f64,
    /// Self-convergence rate from the last three quotients.
    pub rate: Option<f64>,
}

/// Difference quotients `[f(x^_h) - f(x)] / h` for each `h`.
pub fn s_finite_difference(f: impl Fn(&Segment) -> Result<f64>, x: &Segment, hs: &[f64]) -> Result<FiniteDifference> {
    if hs.is_empty() {
        return Err(Error::InvalidSegment("empty step list".into()));
    }
    if hs.windows(2).any(|w| w[1] >= w[0]) || hs.iter().any(|&h| h <= 0.0) {
        return Err(Error::InvalidSegment(format!("steps must be positive and decreasing: {hs:?}")));
    }
    let base = finite("f(x)", f(x)?)?;
    let mut quotients = Vec::with_capacity(hs.len());
    for &h in hs {
        let q = (f(&x.extend_hat(h)?)? - base) / h;
        quotients.push(finite("difference quotient", q)?);
    }
    let n = hs.len();
    let estimate = if n >= 2 {
        let (h1, h2) = (hs[n - 2], hs[n - 1]);
        let (q1, q2) = (quotients[n - 2], quotients[n - 1]);
        (h1 * q2 - h2 * q1) / (h1 - h2)
    } else {
        quotients[0]
    };
    let rate = if n >= 3 {
        let d1 = (quotients[n - 3] - quotients[n - 2]).abs();
        let d2 = (quotients[n - 2] - quotients[n - 1]).abs();
        if d1 > 0.0 && d2 > 0.0 {
            Some((d1 / d2).ln() / (hs[n - 3] / hs[n - 2]).ln())
        } else {
            None
        }
    } else {
        None
    };
    Ok(FiniteDifference { steps: hs.to_vec(), quotients, estimate, rate })
}

/// Generator of `g0(t, |x|_H^2)`: `g0'(t, |x|_H^2) (|x(0)|^2 - |x(-tau)|^2)`.
pub fn s_closed_h(g0_prime: impl Fn(f64) -> f64, _t: f64, x: &Segment) -> f64 {
    let now = norm(x.at_zero());
    let left = norm(x.at_left());
    g0_prime(x.h_norm_sq()) * (now * now - left * left)
}

/// Generator of `psi0(|x - a^|_B^2)`:
/// `2 psi0'(|x - a^|_B^2) (B(x - a^), x(0) 1 - x)_H`.
pub fn s_closed_b(psi0_prime: impl Fn(f64) -> f64, x: &Segment, a_hat: &Segment) -> Result<f64> {
    let diff = x.sub(a_hat)?;
    let held = Segment::constant(x.tau(), x.cells(), x.at_zero())?.sub(x)?;
    Ok(2.0 * psi0_prime(diff.b_norm_sq()) * diff.b_pair(&held)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbResidual {
    pub residual: f64,
    pub hamiltonian: f64,
    pub minimizer: usize,
}

/// `phi_t + S(phi) + H(t, x, nabla_{x(0)} phi)` at a time before the horizon.
pub fn hjb_residual(p: &ProblemSpec, tf: &TestFunction, t: f64, x: &Segment) -> Result<HjbResidual> {
    if t >= p.horizon() - 1e-12 * p.horizon().max(1.0) {
        return Err(Error::TerminalTime(t));
    }
    p.check_segment(x)?;
    let h = hamiltonian(p, t, x, &tf.gradient_at_zero(t, x)?)?;
    let residual = tf.time_derivative(t, x)? + tf.generator(t, x)? + h.value;
    Ok(HjbResidual { residual, hamiltonian: h.value, minimizer: h.argmin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sub,
    Super,
}

/// Settings of the sampled touching test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TouchingOptions {
    /// Radius `M` of the ball `Q`.
    pub radius: f64,
    /// Spacing of the constant and two-level probe values.
    pub lattice_step: f64,
    pub max_candidates: usize,
    pub tol: f64,
}

impl Default for TouchingOptions {
    fn default() -> Self {
        Self { radius: 2.0, lattice_step: 0.5, max_candidates: 20_000, tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct TouchingCertificate {
    pub time: f64,
    pub segment: Segment,
    pub direction: Direction,
    pub radius: f64,
    pub candidates: usize,
    /// Touching value minus the best sampled extension value (sub), or the
    /// reverse (super); nonnegative up to `tol` when touching holds.
    pub gap: f64,
    pub residual: f64,
    /// Whether the residual has the sign the definition requires.
    pub consistent: bool,
}

/// Points of the lattice `step * Z^d` inside the closed ball of radius `r`.
pub fn lattice_points(dim: usize, radius: f64, step: f64) -> Vec<Vec<f64>> {
    let k = (radius / step + 1e-9).floor() as i64;
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (-k..=k).map(move |i| {
                    let mut v = prefix.clone();
                    v.push(i as f64 * step);
                    v
                })
            })
            .collect();
    }
    out.retain(|v| norm(v) <= radius + 1e-12);
    out
}

/// Sampled `⊗`-extensions of `(s, z)` inside `[s, T] x D_Q`: constant and
/// two-level probes on a lattice, and trajectory windows under the sampled
/// controls, at `s` and every later control-grid time.
pub fn extension_candidates(p: &ProblemSpec, s: f64, z: &Segment, opts: &TouchingOptions) -> Result<Vec<TimedSegment>> {
    p.check_segment(z)?;
    let n_s = p.step_index(s)?;
    let stride = p.stride();
    let mut steps = vec![n_s];
    steps.extend((n_s / stride + 1..=p.steps() / stride).map(|i| i * stride));
    let points = lattice_points(p.dim(), opts.radius, opts.lattice_step);
    if points.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let m = z.cells();
    let mut heads: Vec<Segment> = Vec::new();
    for c in &points {
        heads.push(Segment::constant(z.tau(), m, c)?);
    }
    for c1 in &points {
        for c2 in &points {
            if c1 != c2 {
                heads.push(Segment::from_fn(p.dim(), z.tau(), m, |th| {
                    if th < -z.tau() / 2.0 {
                        c1.clone()
                    } else {
                        c2.clone()
                    }
                })?);
            }
        }
    }
    let trajectories = sampled_controls(p, s)?
        .iter()
        .map(|u| solve_euler(p, s, z, u))
        .collect::<Result<Vec<_>>>()?;
    let base = TimedSegment::new(s, z.clone())?;
    let per_time = heads.len() + trajectories.len();
    let required = (steps.len() * per_time) as u128;
    if required > opts.max_candidates as u128 {
        return Err(Error::BudgetExceeded { required, budget: opts.max_candidates as u64 });
    }
    let mut out = Vec::new();
    for &n in &steps {
        let t = p.time(n);
        for h in &heads {
            let ext = base.concat(&TimedSegment::new(t, h.clone())?)?;
            if ext.segment.sup_norm() <= opts.radius + 1e-12 {
                out.push(ext);
            }
        }
        for tr in &trajectories {
            let w = tr.segment_at(t)?;
            if w.sup_norm() <= opts.radius + 1e-12 {
                out.push(TimedSegment::new(t, w)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    Ok(out)
}

/// Value functional `w(t, x)`.
pub type Functional<'a> = dyn Fn(f64, &Segment) -> Result<f64> + Sync + 'a;

fn touching_check(
    p: &ProblemSpec,
    w: &Functional<'_>,
    tf: &TestFunction,
    s: f64,
    z: &Segment,
    opts: &TouchingOptions,
    direction: Direction,
) -> Result<TouchingCertificate> {
    if norm(z.at_zero()) >= opts.radius {
        return Err(Error::InvalidProblem(format!("z(0) = {:?} is not inside Q (radius {})", z.at_zero(), opts.radius)));
    }
    if z.sup_norm() > opts.radius + 1e-12 {
        return Err(Error::InvalidProblem(format!("z leaves the closed ball of radius {}", opts.radius)));
    }
    let sign = match direction {
        Direction::Sub => -1.0,
        Direction::Super => 1.0,
    };
    // sub: maximize w - phi; super: minimize w + phi, i.e. maximize -(w + phi)
    let objective = |t: f64, x: &Segment| -> Result<f64> {
        let v = w(t, x)? + sign * tf.value(t, x)?;
        finite("touching objective", -sign * v)
    };
    let touch = objective(s, z)?;
    let candidates = extension_candidates(p, s, z, opts)?;
    let (best, at) = candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| -> Result<(f64, usize)> { Ok((objective(c.time, &c.segment)?, i)) })
        .try_reduce(
            || (f64::NEG_INFINITY, usize::MAX),
            |a, b| Ok(if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }),
        )?;
    let excess = best - touch;
    if excess > opts.tol {
        return Err(Error::TouchingViolated { time: candidates[at].time, excess });
    }
    let grad = tf.gradient_at_zero(s, z)?;
    let phi_t = tf.time_derivative(s, z)?;
    let s_phi = tf.generator(s, z)?;
    let (residual, consistent) = match direction {
        Direction::Sub => {
            let r = phi_t + s_phi + hamiltonian(p, s, z, &grad)?.value;
            (r, r >= -opts.tol)
        }
        Direction::Super => {
            let r = -phi_t - s_phi + hamiltonian(p, s, z, &grad.negated())?.value;
            (r, r <= opts.tol)
        }
    };
    Ok(TouchingCertificate {
        time: s,
        segment: z.clone(),
        direction,
        radius: opts.radius,
        candidates: candidates.len(),
        gap: -excess,
        residual,
        consistent,
    })
}

/// Sampled subsolution test: if `w - phi` is maximal at `(s, z)` over the
/// sampled extensions, report `phi_t + S(phi) + H(nabla phi)`, which must be
/// nonnegative.
pub fn subsolution_check(
    p: &ProblemSpec,
    w: &Functional<'_>,
    tf: &TestFunction,
    s: f64,
    z: &Segment,
    opts: &TouchingOptions,
) -> Result<TouchingCertificate> {
    touching_check(p, w, tf, s, z, opts, Direction::Sub)
}

/// Sampled supersolution test: if `w + phi` is minimal at `(s, z)` over the
/// sampled extensions, report `-phi_t - S(phi) + H(-nabla phi)`, which must
/// be nonpositive.
pub fn supersolution_check(
    p: &ProblemSpec,
    w: &Functional<'_>,
    tf: &TestFunction,
    s: f64,
    z: &Segment,
    opts: &TouchingOptions,
) -> Result<TouchingCertificate> {
    touching_check(p, w, tf, s, z, opts, Direction::Super)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ProblemBuilder;

    fn ramp(cells: usize) -> Segment {
        Segment::from_scalar_fn(1.0, cells, |t| t).unwrap()
    }

    #[test]
    fn constant_functional_has_zero_generator() {
        let fd = s_finite_difference(|_| Ok(4.0), &ramp(64), &[0.125, 0.0625]).unwrap();
        assert_eq!(fd.quotients, vec![0.0, 0.0]);
        assert_eq!(fd.estimate, 0.0);
    }

    #[test]
    fn constant_segment_is_its_own_extension() {
        let x = Segment::constant(1.0, 16, &[1.5]).unwrap();
        let fd = s_finite_difference(|y| Ok(y.h_norm_sq()), &x, &default_schedule(&x)).unwrap();
        assert!(fd.quotients.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn h_type_ramp() {
        let x = ramp(64);
        assert_eq!(s_closed_h(|_| 1.0, 0.0, &x), -1.0);
        let fd = s_finite_difference(|y| Ok(y.h_norm_sq()), &x, &default_schedule(&x)).unwrap();
        assert!((fd.quotients[3] + 1.0).abs() < 1e-9, "{:?}", fd.quotients);
    }

    #[test]
    fn h_type_present_override() {
        let c = 0.7;
        let x = Segment::constant(1.0, 32, &[c]).unwrap().with_present(&[2.0 * c]).unwrap();
        let r = x.h_norm_sq();
        assert!((r - c * c).abs() < 1e-14);
        let closed = s_closed_h(|r| 2.0 * r, 0.0, &x);
        assert!((closed - 2.0 * r * 3.0 * c * c).abs() < 1e-12);
        let fd = s_finite_difference(|y| Ok(y.h_norm_sq().powi(2)), &x, &default_schedule(&x)).unwrap();
        assert!((fd.estimate - closed).abs() < 1e-2, "{} vs {closed}", fd.estimate);
    }

    #[test]
    fn b_type_ramp_tends_to_minus_quarter() {
        let x = ramp(64);
        let zero = Segment::zeros(1, 1.0, 64).unwrap();
        let closed = s_closed_b(|_| 1.0, &x, &zero).unwrap();
        assert!((closed + 0.25).abs() < 0.01, "{closed}");
        let fd = s_finite_difference(|y| Ok(y.b_norm_sq()), &x, &default_schedule(&x)).unwrap();
        assert!((fd.quotients[3] + 0.25).abs() < 0.01, "{:?}", fd.quotients);
        assert_eq!(s_closed_b(|_| 1.0, &x, &x).unwrap(), 0.0);
        let c = Segment::constant(1.0, 64, &[2.0]).unwrap();
        assert_eq!(s_closed_b(|_| 1.0, &c, &zero).unwrap(), 0.0);
    }

    #[test]
    fn classical_residual() {
        let p = ProblemBuilder::new(1, 1.0, 2.0)
            .cells(8)
            .drift(|_, _, _, u, o| o[0] = u[0])
            .terminal_cost(|x| x[0])
            .controls(vec![vec![-1.0], vec![1.0]])
            .build()
            .unwrap();
        let tf = TestFunction::new().present_value(|t, x0| x0[0] - (2.0 - t), |_, _| 1.0, |_, _| vec![1.0]);
        let x = Segment::from_scalar_fn(1.0, 8, |th| th.sin()).unwrap();
        let r = hjb_residual(&p, &tf, 0.5, &x).unwrap();
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.minimizer, 0);
        let bumped = tf.clone().time_only(|t| 0.1 * t, |_| 0.1);
        assert!((hjb_residual(&p, &bumped, 0.5, &x).unwrap().residual - 0.1).abs() < 1e-15);
        assert_eq!(hjb_residual(&p, &tf, 2.0, &x).unwrap_err(), Error::TerminalTime(2.0));
    }

    #[test]
    fn lattice_inside_ball() {
        let pts = lattice_points(2, 1.0, 0.5);
        assert!(pts.iter().all(|v| norm(v) <= 1.0 + 1e-12));
        assert_eq!(pts.len(), 13);
        assert_eq!(lattice_points(1, 1.0, 0.5).len(), 5);
    }
}
