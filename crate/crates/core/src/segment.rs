//! Segments of the history space: bounded, right-continuous `R^d`-valued
//! functions on `[-tau, 0]`, stored piecewise-constant on a uniform grid.
//!
//! A segment with `m` cells and step `dt = tau / m` stores `m + 1` vectors.
//! Value `k < m` is the function value on `[-tau + k dt, -tau + (k+1) dt)`,
//! value `m` is the value at `theta = 0`. The last value carries zero measure
//! and never enters an integral.

use std::fmt;

use crate::error::{Error, Result};

const GRID_TOL: f64 = 1e-9;

/// Converts `value` into an integer number of `step`s, rejecting off-grid input.
pub fn grid_index(what: &'static str, value: f64, step: f64) -> Result<usize> {
    if !value.is_finite() || value < -GRID_TOL * step {
        return Err(Error::OffGrid { what, value, step });
    }
    let k = (value / step).round();
    if (k * step - value).abs() > GRID_TOL * step.max(value.abs()) {
        return Err(Error::OffGrid { what, value, step });
    }
    Ok(k as usize)
}

#[derive(Clone, PartialEq)]
pub struct Segment {
    dim: usize,
    tau: f64,
    cells: usize,
    values: Vec<f64>,
}

impl fmt::Debug for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Segment")
            .field("dim", &self.dim)
            .field("tau", &self.tau)
            .field("cells", &self.cells)
            .field("x(-tau)", &self.at_left())
            .field("x(0)", &self.at_zero())
            .finish()
    }
}

impl Segment {
    /// Builds a segment from `(cells + 1) * dim` row-major values.
    pub fn new(dim: usize, tau: f64, cells: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSegment("dimension must be positive".into()));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidSegment(format!("tau must be positive, got {tau}")));
        }
        if cells == 0 {
            return Err(Error::InvalidSegment("at least one cell is required".into()));
        }
        if values.len() != (cells + 1) * dim {
            return Err(Error::InvalidSegment(format!(
                "expected {} values, got {}",
                (cells + 1) * dim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSegment(format!("non-finite value at index {i}")));
        }
        Ok(Self { dim, tau, cells, values })
    }

    pub fn zeros(dim: usize, tau: f64, cells: usize) -> Result<Self> {
        Self::new(dim, tau, cells, vec![0.0; (cells + 1) * dim])
    }

    pub fn constant(tau: f64, cells: usize, value: &[f64]) -> Result<Self> {
        let values = value.iter().copied().cycle().take((cells + 1) * value.len()).collect();
        Self::new(value.len(), tau, cells, values)
    }

    /// Samples `f` at the left end of every cell and at `theta = 0`.
    pub fn from_fn(dim: usize, tau: f64, cells: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let step = tau / cells as f64;
        let mut values = Vec::with_capacity((cells + 1) * dim);
        for k in 0..=cells {
            let theta = if k == cells { 0.0 } else { -tau + k as f64 * step };
            let v = f(theta);
            if v.len() != dim {
                return Err(Error::InvalidSegment(format!(
                    "sampler returned {} components, expected {dim}",
                    v.len()
                )));
            }
            values.extend_from_slice(&v);
        }
        Self::new(dim, tau, cells, values)
    }

    pub fn from_scalar_fn(tau: f64, cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_fn(1, tau, cells, |theta| vec![f(theta)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn step(&self) -> f64 {
        self.tau / self.cells as f64
    }

    /// Grid node `theta_k = -tau + k * step`.
    pub fn theta(&self, k: usize) -> f64 {
        if k == self.cells {
            0.0
        } else {
            -self.tau + k as f64 * self.step()
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// `x(0)`.
    pub fn at_zero(&self) -> &[f64] {
        self.value(self.cells)
    }

    /// `x(-tau)`.
    pub fn at_left(&self) -> &[f64] {
        self.value(0)
    }

    /// Point evaluation of the right-continuous step function.
    pub fn eval(&self, theta: f64) -> &[f64] {
        if theta >= 0.0 {
            return self.at_zero();
        }
        let k = ((theta + self.tau) / self.step()).floor().max(0.0) as usize;
        self.value(k.min(self.cells - 1))
    }

    pub fn same_grid(&self, other: &Segment) -> bool {
        self.dim == other.dim
            && self.cells == other.cells
            && (self.tau - other.tau).abs() <= 1e-12 * self.tau.max(other.tau)
    }

    pub fn ensure_same_grid(&self, other: &Segment) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "(d={}, tau={}, m={}) vs (d={}, tau={}, m={})",
                self.dim, self.tau, self.cells, other.dim, other.tau, other.cells
            )))
        }
    }

    /// Copy with the `theta = 0` value replaced.
    pub fn with_present(&self, value: &[f64]) -> Result<Segment> {
        if value.len() != self.dim {
            return Err(Error::InvalidSegment(format!(
                "present value has {} components, expected {}",
                value.len(),
                self.dim
            )));
        }
        let mut out = self.clone();
        let m = self.cells;
        out.values[m * self.dim..].copy_from_slice(value);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSegment("non-finite present value".into()));
        }
        Ok(out)
    }

    /// Same function on a grid with `factor` times as many cells.
    pub fn refined(&self, factor: usize) -> Segment {
        assert!(factor >= 1, "refinement factor must be positive");
        let d = self.dim;
        let mut values = Vec::with_capacity((self.cells * factor + 1) * d);
        for k in 0..self.cells {
            for _ in 0..factor {
                values.extend_from_slice(self.value(k));
            }
        }
        values.extend_from_slice(self.at_zero());
        Segment { dim: d, tau: self.tau, cells: self.cells * factor, values }
    }

    /// Pointwise `self + c * other`.
    pub fn axpy(&self, c: f64, other: &Segment) -> Result<Segment> {
        self.ensure_same_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        Segment::new(self.dim, self.tau, self.cells, values)
    }

    pub fn sub(&self, other: &Segment) -> Result<Segment> {
        self.axpy(-1.0, other)
    }

    pub fn scaled(&self, c: f64) -> Segment {
        Segment {
            dim: self.dim,
            tau: self.tau,
            cells: self.cells,
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// `|x|_D = sup_theta |x(theta)|`.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks_exact(self.dim)
            .map(norm)
            .fold(0.0, f64::max)
    }

    /// `(a, x)_H = int_{-tau}^0 a(theta) . x(theta) dtheta`, exact for step functions.
    pub fn h_inner(&self, other: &Segment) -> Result<f64> {
        self.ensure_same_grid(other)?;
        Ok(self.h_inner_unchecked(other))
    }

    fn h_inner_unchecked(&self, other: &Segment) -> f64 {
        let n = self.cells * self.dim;
        let sum: f64 = self.values[..n].iter().zip(&other.values[..n]).map(|(a, b)| a * b).sum();
        sum * self.step()
    }

    pub fn h_norm(&self) -> f64 {
        self.h_inner_unchecked(self).sqrt()
    }

    pub fn h_norm_sq(&self) -> f64 {
        self.h_inner_unchecked(self)
    }

    /// `(Bx)(s) = int_s^0 x(theta) dtheta` at the grid nodes. `Bx` is
    /// continuous and piecewise linear between nodes; `y(0) = 0`.
    pub fn b_transform(&self) -> Segment {
        let d = self.dim;
        let h = self.step();
        let mut values = vec![0.0; (self.cells + 1) * d];
        for k in (0..self.cells).rev() {
            for i in 0..d {
                values[k * d + i] = values[(k + 1) * d + i] + self.values[k * d + i] * h;
            }
        }
        Segment { dim: d, tau: self.tau, cells: self.cells, values }
    }

    /// `|x|_B^2 = int (Bx)^2`, integrating the piecewise-linear `Bx` exactly.
    pub fn b_norm_sq(&self) -> f64 {
        let y = self.b_transform();
        let h = self.step();
        let d = self.dim;
        let mut acc = 0.0;
        for k in 0..self.cells {
            let (l, r) = (y.value(k), y.value(k + 1));
            for i in 0..d {
                acc += l[i] * l[i] + l[i] * r[i] + r[i] * r[i];
            }
        }
        acc * h / 3.0
    }

    pub fn b_norm(&self) -> f64 {
        self.b_norm_sq().sqrt()
    }

    /// `(Bx, w)_H` with `Bx` piecewise linear and `w` piecewise constant.
    pub fn b_pair(&self, w: &Segment) -> Result<f64> {
        self.ensure_same_grid(w)?;
        let y = self.b_transform();
        let d = self.dim;
        let mut acc = 0.0;
        for k in 0..self.cells {
            let (l, r, wk) = (y.value(k), y.value(k + 1), w.value(k));
            for i in 0..d {
                acc += 0.5 * (l[i] + r[i]) * wk[i];
            }
        }
        Ok(acc * self.step())
    }

    /// `sup_l |int_l^0 x(theta) dtheta|`; attained at a grid node.
    pub fn tail_integral_sup(&self) -> f64 {
        self.b_transform().sup_norm()
    }

    /// Hold-constant extension shifted by `h`: `theta -> x(h + theta)` when
    /// `h + theta < 0`, else `x(0)`.
    pub fn extend_hat(&self, h: f64) -> Result<Segment> {
        let j = grid_index("h", h, self.step())?;
        let d = self.dim;
        let m = self.cells;
        let mut values = Vec::with_capacity(self.values.len());
        for k in 0..=m {
            let src = if k + j < m { k + j } else { m };
            values.extend_from_slice(self.value(src));
        }
        Ok(Segment { dim: d, tau: self.tau, cells: m, values })
    }

    /// Plain-text column format: header `d tau dt`, then `m + 1` rows of `d` floats.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.dim, self.tau, self.step());
        for row in self.values.chunks_exact(self.dim) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Segment> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidSegment("missing header line `d tau dt`".into()))?;
        let head = parse_floats(header)?;
        if head.len() != 3 {
            return Err(Error::InvalidSegment(format!("header must be `d tau dt`, got `{header}`")));
        }
        let (d, tau, dt) = (head[0], head[1], head[2]);
        if d < 1.0 || d.fract() != 0.0 {
            return Err(Error::InvalidSegment(format!("bad dimension {d}")));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidSegment(format!("bad grid step {dt}")));
        }
        let m = grid_index("tau", tau, dt).map_err(|_| {
            Error::InvalidSegment(format!("tau = {tau} is not a multiple of dt = {dt}"))
        })?;
        let d = d as usize;
        let mut values = Vec::with_capacity((m + 1) * d);
        for line in lines {
            let row = parse_floats(line)?;
            if row.len() != d {
                return Err(Error::InvalidSegment(format!("row `{line}` has {} entries, expected {d}", row.len())));
            }
            values.extend(row);
        }
        Segment::new(d, tau, m, values)
    }
}

fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidSegment(format!("cannot parse `{s}` as a number")))
        })
        .collect()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A segment paired with the time at which it is the current history.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedSegment {
    pub time: f64,
    pub segment: Segment,
}

impl TimedSegment {
    pub fn new(time: f64, segment: Segment) -> Result<Self> {
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::TimeOrder(format!("time must be nonnegative, got {time}")));
        }
        Ok(Self { time, segment })
    }

    /// The splice `(t, w) ⊗ (t', w') = (t', w~)`: `w~` equals `w'` on
    /// `[t - t', 0]` and the shifted base `w(t' - t + theta)` below it.
    pub fn concat(&self, head: &TimedSegment) -> Result<TimedSegment> {
        let base = &self.segment;
        base.ensure_same_grid(&head.segment)?;
        if head.time < self.time - GRID_TOL * base.step() {
            return Err(Error::TimeOrder(format!(
                "head time {} precedes base time {}",
                head.time, self.time
            )));
        }
        let j = grid_index("splice offset", (head.time - self.time).max(0.0), base.step())?;
        let m = base.cells;
        let d = base.dim;
        if j >= m {
            return Ok(head.clone());
        }
        let mut values = Vec::with_capacity(base.values.len());
        for k in 0..=m {
            if k >= m - j {
                values.extend_from_slice(head.segment.value(k));
            } else {
                values.extend_from_slice(base.value(k + j));
            }
        }
        Ok(TimedSegment {
            time: head.time,
            segment: Segment { dim: d, tau: base.tau, cells: m, values },
        })
    }

    /// True when `later = self ⊗ later`, i.e. `later` keeps this history
    /// below its splice point. Comparison is exact on grid values.
    pub fn is_extended_by(&self, later: &TimedSegment) -> bool {
        let (a, b) = (&self.segment, &later.segment);
        if !a.same_grid(b) || later.time < self.time - GRID_TOL * a.step() {
            return false;
        }
        let Ok(j) = grid_index("splice offset", (later.time - self.time).max(0.0), a.step()) else {
            return false;
        };
        let m = a.cells;
        if j >= m {
            return true;
        }
        (0..m - j).all(|k| b.value(k) == a.value(k + j))
    }
}
