//! Flat `key = value` run configuration and the builtin problem registry.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{ProblemBuilder, ProblemSpec};
use crate::error::{Error, Result};
use crate::segment::{dot, Segment};

const KNOWN_KEYS: &[&str] = &[
    "family", "d", "tau", "T", "cells", "control_step", "controls", "hyp", "c1", "c2", "c3", "b", "a_offset", "q0",
    "wx", "wu", "wphi", "phi", "x", "t", "s", "control", "method", "tol", "max_iter", "budget", "tf_x0", "tf_t",
    "tf_const", "tf_h", "tf_b", "alpha", "M", "lattice_step", "jumps", "epsilon", "delta", "w_offset", "w_jump",
];

pub const FAMILIES: &[&str] = &[
    "memoryless_affine",
    "pure_delay",
    "memory_scalar",
    "memoryless_affine_quadratic",
    "pure_delay_quadratic",
    "memory_scalar_quadratic",
];

/// Parsed configuration: a flat map of known keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", no + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
        }
        if entries.is_empty() {
            return Err(Error::Config("configuration is empty".into()));
        }
        if !entries.contains_key("family") {
            return Err(Error::Config("missing key \"family\"".into()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn family(&self) -> &str {
        self.get("family").unwrap_or_default()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => parse_f64(key, v),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got {v:?}"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
        }
    }

    /// `;`-separated list of numbers.
    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| v.split(';').map(|s| parse_f64(key, s.trim())).collect())
            .transpose()
    }

    /// `;`-separated points with `,`-separated components; a single
    /// component is broadcast to `dim`.
    pub fn points(&self, key: &str, dim: usize) -> Result<Option<Vec<Vec<f64>>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(';').map(|p| parse_vector(key, p, dim)).collect::<Result<Vec<_>>>().map(Some)
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))?;
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: value {v:?} is not finite")));
    }
    Ok(x)
}

fn parse_vector(key: &str, text: &str, dim: usize) -> Result<Vec<f64>> {
    let comps: Vec<f64> = text.split(',').map(|s| parse_f64(key, s.trim())).collect::<Result<_>>()?;
    match comps.len() {
        1 => Ok(vec![comps[0]; dim]),
        n if n == dim => Ok(comps),
        n => Err(Error::Config(format!("{key}: {text:?} has {n} components, expected 1 or {dim}"))),
    }
}

fn in_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<f64> {
    if v < lo || v > hi {
        return Err(Error::InvalidProblem(format!("{key} = {v} outside [{lo}, {hi}]")));
    }
    Ok(v)
}

/// Builds one of the registered problem families.
///
/// * `memoryless_affine`: `F = c1 x + c2 u`, `a = 0`, `b = 0`.
/// * `pure_delay`: `F = 0`, `b = b I`.
/// * `memory_scalar`: `F = c1 x + c2 (a, x)_H 1 + c3 u`, `a(theta) = theta + tau + a_offset`.
///
/// Costs are `q = q0`, `phi(x) = phi * sum x_i`; the `_quadratic` variants
/// use `q = q0 + wx |x|^2 + wu |u|^2` and `phi(x) = wphi |x|^2`.
pub fn load_problem(family: &str, params: &RunConfig) -> Result<ProblemSpec> {
    let (base, quadratic) = match family.strip_suffix("_quadratic") {
        Some(b) => (b, true),
        None => (family, false),
    };
    if !FAMILIES.contains(&family) {
        return Err(Error::Config(format!("unknown family {family:?}; known: {}", FAMILIES.join(", "))));
    }
    let d = params.usize_or("d", 1)?;
    if !(1..=4).contains(&d) {
        return Err(Error::InvalidProblem(format!("d = {d} outside [1, 4]")));
    }
    let tau = in_range("tau", params.f64_or("tau", 1.0)?, 1e-6, 1e3)?;
    let horizon = in_range("T", params.f64_or("T", 1.0)?, 1e-6, 1e3)?;
    let cells = params.usize_or("cells", 16)?;
    if !(1..=4096).contains(&cells) {
        return Err(Error::InvalidProblem(format!("cells = {cells} outside [1, 4096]")));
    }
    let c1 = in_range("c1", params.f64_or("c1", 0.0)?, -100.0, 100.0)?;
    let c2 = in_range("c2", params.f64_or("c2", 1.0)?, -100.0, 100.0)?;
    let c3 = in_range("c3", params.f64_or("c3", 1.0)?, -100.0, 100.0)?;
    let controls = params.points("controls", d)?.unwrap_or_else(|| vec![vec![-1.0; d], vec![0.0; d], vec![1.0; d]]);
    let mut builder = ProblemBuilder::new(d, tau, horizon)
        .cells(cells)
        .control_step(params.f64_or("control_step", (horizon / 4.0).min(0.5))?)
        .controls(controls)
        .require_weight_vanishing(params.bool_or("hyp", true)?);
    let lipschitz = match base {
        "memoryless_affine" => {
            builder = builder.drift(move |_, x, _, u, out| {
                for i in 0..out.len() {
                    out[i] = c1 * x[i] + c2 * u[i];
                }
            });
            c1.abs() + c2.abs()
        }
        "pure_delay" => {
            let entries = params.f64_list("b")?.unwrap_or_else(|| vec![1.0]);
            let matrix: Vec<f64> = match entries.len() {
                1 => (0..d * d).map(|k| if k % (d + 1) == 0 { entries[0] } else { 0.0 }).collect(),
                n if n == d * d => entries,
                n => return Err(Error::Config(format!("b: {n} entries, expected 1 or {}", d * d))),
            };
            let sup = matrix.iter().map(|v| v * v).sum::<f64>().sqrt();
            in_range("|b|", sup, 0.0, 100.0)?;
            builder = builder.delay(move |_, out| out.copy_from_slice(&matrix), sup, 0.0);
            0.0
        }
        "memory_scalar" => {
            let offset = params.f64_or("a_offset", 0.0)?;
            builder = builder
                .weight(move |th| vec![th + tau + offset; d])
                .drift(move |_, x, y, u, out| {
                    for i in 0..out.len() {
                        out[i] = c1 * x[i] + c2 * y + c3 * u[i];
                    }
                });
            c1.abs() + c2.abs() + c3.abs()
        }
        _ => unreachable!("family list checked above"),
    };
    builder = builder.lipschitz(lipschitz.max(1e-3));
    let q0 = params.f64_or("q0", 0.0)?;
    if quadratic {
        let wx = in_range("wx", params.f64_or("wx", 0.0)?, 0.0, 1e3)?;
        let wu = in_range("wu", params.f64_or("wu", 0.0)?, 0.0, 1e3)?;
        let wphi = in_range("wphi", params.f64_or("wphi", 1.0)?, 0.0, 1e3)?;
        builder = builder
            .running_cost(move |_, x, u| q0 + wx * dot(x, x) + wu * dot(u, u))
            .terminal_cost(move |x| wphi * dot(x, x));
    } else {
        let phi = params.f64_or("phi", 1.0)?;
        builder = builder.running_cost(move |_, _, _| q0).terminal_cost(move |x| phi * x.iter().sum::<f64>());
    }
    builder.build()
}

/// Initial segment from the `x` key: `const:<v>`, `linear:<a>;<b>` for
/// `a + b theta`, `random:<amp>` for seeded uniform cell values, or
/// `file:<path>` in the segment text format.
pub fn load_segment(p: &ProblemSpec, cfg: &RunConfig, seed: u64) -> Result<Segment> {
    let spec = cfg.get("x").unwrap_or("const:0");
    let (kind, arg) = spec.split_once(':').ok_or_else(|| Error::Config(format!("x: expected kind:value, got {spec:?}")))?;
    let (d, tau, m) = (p.dim(), p.tau(), p.cells());
    match kind {
        "const" => Segment::constant(tau, m, &parse_vector("x", arg, d)?),
        "linear" => {
            let (a, b) = arg.split_once(';').ok_or_else(|| Error::Config("x: linear needs a;b".into()))?;
            let (a, b) = (parse_vector("x", a, d)?, parse_vector("x", b, d)?);
            Segment::from_fn(d, tau, m, |th| a.iter().zip(&b).map(|(ai, bi)| ai + bi * th).collect())
        }
        "random" => {
            let amp = parse_f64("x", arg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..(m + 1) * d).map(|_| rng.gen_range(-amp..=amp)).collect();
            Segment::new(d, tau, m, values)
        }
        "file" => {
            let text = std::fs::read_to_string(arg).map_err(|e| Error::Io(format!("{arg}: {e}")))?;
            let x = Segment::from_text(&text)?;
            p.check_segment(&x)?;
            Ok(x)
        }
        other => Err(Error::Config(format!("x: unknown kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rules() {
        assert!(matches!(RunConfig::parse(""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("# only a comment\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("tau = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("family = pure_delay\nbogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("family = pure_delay\ntau\n"), Err(Error::Config(_))));
        let c = RunConfig::parse("family = pure_delay # trailing\n\n T = 2 \n").unwrap();
        assert_eq!(c.family(), "pure_delay");
        assert_eq!(c.f64_or("T", 1.0).unwrap(), 2.0);
        assert_eq!(c.f64_or("tau", 1.0).unwrap(), 1.0);
    }

    #[test]
    fn points_broadcast() {
        let c = RunConfig::from_pairs(&[("family", "pure_delay"), ("controls", "-1; 0,1 ;2")]).unwrap();
        assert_eq!(c.points("controls", 2).unwrap().unwrap(), vec![vec![-1.0, -1.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        assert!(c.points("controls", 3).is_err());
    }

    #[test]
    fn registry() {
        for fam in FAMILIES {
            let c = RunConfig::from_pairs(&[("family", fam), ("T", "2"), ("cells", "8")]).unwrap();
            let p = load_problem(fam, &c).unwrap();
            assert_eq!(p.steps(), 16);
        }
        let c = RunConfig::from_pairs(&[("family", "nope")]).unwrap();
        assert!(matches!(load_problem("nope", &c), Err(Error::Config(_))));
        let c = RunConfig::from_pairs(&[("family", "memory_scalar"), ("a_offset", "0.5")]).unwrap();
        assert!(matches!(load_problem("memory_scalar", &c), Err(Error::InvalidProblem(_))));
        let c = RunConfig::from_pairs(&[("family", "memory_scalar"), ("a_offset", "0.5"), ("hyp", "false")]).unwrap();
        assert!(load_problem("memory_scalar", &c).is_ok());
        let c = RunConfig::from_pairs(&[("family", "pure_delay"), ("c1", "1000")]).unwrap();
        assert!(load_problem("pure_delay", &c).is_err());
    }

    #[test]
    fn segments_from_config() {
        let c = RunConfig::from_pairs(&[("family", "pure_delay"), ("cells", "4"), ("x", "linear:1;2")]).unwrap();
        let p = load_problem("pure_delay", &c).unwrap();
        let x = load_segment(&p, &c, 0).unwrap();
        assert_eq!(x.at_left(), &[-1.0]);
        assert_eq!(x.at_zero(), &[1.0]);
        let c = RunConfig::from_pairs(&[("family", "pure_delay"), ("cells", "4"), ("x", "random:1")]).unwrap();
        let a = load_segment(&p, &c, 7).unwrap();
        assert_eq!(a, load_segment(&p, &c, 7).unwrap());
        assert_ne!(a, load_segment(&p, &c, 8).unwrap());
    }
}
