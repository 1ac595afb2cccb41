//! The four inverse problems: residual operators, initial/boundary operators,
//! true coefficients and closed-form solutions used to manufacture data.
//!
//! Coordinates are ordered spatial axes first, time last: `(x, t)` for the
//! 1-D problems and `(x, y, t)` for Navier–Stokes. Unknown coefficients are
//! stored as the quantity that multiplies the operator term (the square of
//! the physical coefficient for heat, wave and beam).

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_engine::{BundleLookup, DerivBundle, DerivSpec, Partial, Var};
use crate::losses::TermId;

/// Arithmetic needed by the residual operators; implemented for plain
/// numbers and for tape variables.
pub trait Field:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Mul<f64, Output = Self>
{
}

impl Field for f64 {}
impl Field for Var<'_> {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProblemId {
    #[serde(rename = "heat")]
    Heat,
    #[serde(rename = "wave")]
    Wave,
    #[serde(rename = "beam")]
    Beam,
    #[serde(rename = "navier_stokes_2d")]
    NavierStokes,
}

impl ProblemId {
    pub const ALL: [ProblemId; 4] =
        [ProblemId::Heat, ProblemId::Wave, ProblemId::Beam, ProblemId::NavierStokes];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemId::Heat => "heat",
            ProblemId::Wave => "wave",
            ProblemId::Beam => "beam",
            ProblemId::NavierStokes => "navier_stokes_2d",
        }
    }
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(ProblemId::Heat),
            "wave" => Ok(ProblemId::Wave),
            "beam" => Ok(ProblemId::Beam),
            "navier_stokes_2d" | "navier_stokes" | "ns" => Ok(ProblemId::NavierStokes),
            _ => Err(Error::Config(format!("unknown problem '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unknown {
    pub name: &'static str,
    pub truth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    /// `t` at the lower end of its range.
    Initial,
    /// The first spatial axis at either end of its range.
    Boundary,
}

/// One initial- or boundary-condition operator acting on output channel 0.
#[derive(Debug, Clone)]
pub struct Condition {
    pub term: TermId,
    pub manifold: Manifold,
    pub partial: Partial,
    pub target: fn(&[f64]) -> f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Analytic,
    External,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub id: ProblemId,
    pub input_dim: usize,
    pub axis_names: Vec<&'static str>,
    /// Closed `[lo, hi]` range per input axis.
    pub domain: Vec<(f64, f64)>,
    pub channels: Vec<&'static str>,
    /// Output channels that appear in the data loss.
    pub data_channels: Vec<usize>,
    pub residual_terms: Vec<TermId>,
    pub residual_spec: DerivSpec,
    pub unknowns: Vec<Unknown>,
    pub conditions: Vec<Condition>,
    pub source: DataSource,
}

const HEAT_BETA: f64 = 1.0 / 20.0;
const WAVE_C: f64 = 2.0;
const BEAM_ALPHA: f64 = 1.0;
const NS_BETA1: f64 = 1.0;
const NS_BETA2: f64 = 0.01;

fn zero(_: &[f64]) -> f64 {
    0.0
}

fn heat_ic(p: &[f64]) -> f64 {
    (10.0 * PI * p[0]).sin()
}

fn wave_ic(p: &[f64]) -> f64 {
    (PI * p[0]).sin() + 0.5 * (4.0 * PI * p[0]).sin()
}

fn beam_ic(p: &[f64]) -> f64 {
    (PI * p[0]).sin()
}

impl Problem {
    pub fn new(id: ProblemId) -> Self {
        let x = Partial::d(0, 1);
        let xx = Partial::d(0, 2);
        let value = Partial::value();
        match id {
            ProblemId::Heat => Self::one_d(
                id,
                vec![(0, Partial::d(1, 1)), (0, xx)],
                Unknown { name: "beta_sq", truth: HEAT_BETA * HEAT_BETA },
                vec![
                    Condition { term: TermId::I, manifold: Manifold::Initial, partial: value, target: heat_ic },
                    Condition { term: TermId::B, manifold: Manifold::Boundary, partial: value, target: zero },
                ],
            ),
            ProblemId::Wave => Self::one_d(
                id,
                vec![(0, Partial::d(1, 2)), (0, xx)],
                Unknown { name: "c_sq", truth: WAVE_C * WAVE_C },
                vec![
                    Condition { term: TermId::I1, manifold: Manifold::Initial, partial: value, target: wave_ic },
                    Condition { term: TermId::I2, manifold: Manifold::Initial, partial: Partial::d(1, 1), target: zero },
                    Condition { term: TermId::B, manifold: Manifold::Boundary, partial: value, target: zero },
                ],
            ),
            ProblemId::Beam => Self::one_d(
                id,
                vec![(0, Partial::d(1, 2)), (0, Partial::d(0, 4)), (0, xx)],
                Unknown { name: "alpha_sq", truth: BEAM_ALPHA * BEAM_ALPHA },
                vec![
                    Condition { term: TermId::I1, manifold: Manifold::Initial, partial: value, target: beam_ic },
                    Condition { term: TermId::I2, manifold: Manifold::Initial, partial: Partial::d(1, 1), target: zero },
                    Condition { term: TermId::B1, manifold: Manifold::Boundary, partial: value, target: zero },
                    Condition { term: TermId::B2, manifold: Manifold::Boundary, partial: xx, target: zero },
                ],
            ),
            ProblemId::NavierStokes => {
                let y = Partial::d(1, 1);
                let yy = Partial::d(1, 2);
                let t = Partial::d(2, 1);
                let mut req = Vec::new();
                for c in 0..2 {
                    req.extend([(c, value), (c, t), (c, x), (c, y), (c, xx), (c, yy)]);
                }
                req.extend([(2, x), (2, y)]);
                Problem {
                    id,
                    input_dim: 3,
                    axis_names: vec!["x", "y", "t"],
                    domain: vec![(0.0, 2.0 * PI), (0.0, 2.0 * PI), (0.0, 1.0)],
                    channels: vec!["u", "v", "p"],
                    data_channels: vec![0, 1],
                    residual_terms: vec![TermId::R1, TermId::R2, TermId::R3],
                    residual_spec: DerivSpec::new(3, 3, req).expect("static spec"),
                    unknowns: vec![
                        Unknown { name: "beta1", truth: NS_BETA1 },
                        Unknown { name: "beta2", truth: NS_BETA2 },
                    ],
                    conditions: vec![],
                    source: DataSource::Analytic,
                }
            }
        }
    }

    /// Navier–Stokes on an ingested cylinder-wake style dataset.
    pub fn navier_stokes_external() -> Self {
        let mut p = Problem::new(ProblemId::NavierStokes);
        p.domain = vec![(1.0, 8.0), (-2.0, 2.0), (0.0, 7.0)];
        p.source = DataSource::External;
        p
    }

    fn one_d(id: ProblemId, req: Vec<(usize, Partial)>, unknown: Unknown, conditions: Vec<Condition>) -> Self {
        Problem {
            id,
            input_dim: 2,
            axis_names: vec!["x", "t"],
            domain: vec![(0.0, 1.0), (0.0, 1.0)],
            channels: vec!["u"],
            data_channels: vec![0],
            residual_terms: vec![TermId::R],
            residual_spec: DerivSpec::new(2, 1, req).expect("static spec"),
            unknowns: vec![unknown],
            conditions,
            source: DataSource::Analytic,
        }
    }

    pub fn outputs(&self) -> usize {
        self.channels.len()
    }

    pub fn time_axis(&self) -> usize {
        self.input_dim - 1
    }

    pub fn true_values(&self) -> Vec<f64> {
        self.unknowns.iter().map(|u| u.truth).collect()
    }

    pub fn unknown_names(&self) -> Vec<String> {
        self.unknowns.iter().map(|u| u.name.to_string()).collect()
    }

    /// Derivative spec covering every condition operator on `manifold`.
    pub fn condition_spec(&self, manifold: Manifold) -> DerivSpec {
        let req = self
            .conditions
            .iter()
            .filter(|c| c.manifold == manifold)
            .map(|c| (0, c.partial))
            .collect();
        DerivSpec::new(self.input_dim, self.outputs(), req).expect("static spec")
    }

    /// Every loss term of the composite loss, in canonical order.
    pub fn term_ids(&self) -> Vec<TermId> {
        let mut ids = self.residual_terms.clone();
        let mut conds: Vec<TermId> = self.conditions.iter().map(|c| c.term).collect();
        conds.sort();
        ids.extend(conds);
        ids.extend(self.data_terms());
        ids
    }

    pub fn data_terms(&self) -> Vec<TermId> {
        match self.id {
            ProblemId::NavierStokes => vec![TermId::D1, TermId::D2],
            _ => vec![TermId::D],
        }
    }

    /// Residual value(s) at one point (or a column of points) given the
    /// derivative bundle and the coefficient estimates.
    pub fn residual<T: Field, B: BundleLookup<T>>(&self, b: &B, gamma: &[T]) -> Result<Vec<T>> {
        if gamma.len() != self.unknowns.len() {
            return Err(Error::Shape(format!(
                "{} expects {} coefficients, got {}",
                self.id,
                self.unknowns.len(),
                gamma.len()
            )));
        }
        let d = |c: usize, axis: usize, order: u8| b.entry(c, Partial::d(axis, order));
        Ok(match self.id {
            ProblemId::Heat => vec![d(0, 1, 1)? - gamma[0] * d(0, 0, 2)?],
            ProblemId::Wave => vec![d(0, 1, 2)? - gamma[0] * d(0, 0, 2)?],
            ProblemId::Beam => vec![d(0, 1, 2)? + gamma[0] * d(0, 0, 4)?],
            ProblemId::NavierStokes => {
                let (b1, b2) = (gamma[0], gamma[1]);
                let u = d(0, 0, 0)?;
                let v = d(1, 0, 0)?;
                let momentum = |c: usize, grad_p: T| -> Result<T> {
                    let convect = u * d(c, 0, 1)? + v * d(c, 1, 1)?;
                    let laplace = d(c, 0, 2)? + d(c, 1, 2)?;
                    Ok(d(c, 2, 1)? + b1 * convect + grad_p - b2 * laplace)
                };
                let f = momentum(0, d(2, 0, 1)?)?;
                let g = momentum(1, d(2, 1, 1)?)?;
                let h = d(0, 0, 1)? + d(1, 1, 1)?;
                vec![f, g, h]
            }
        })
    }

    /// Closed-form field values (every output channel) with the true
    /// coefficients.
    pub fn analytic_solution(&self, point: &[f64]) -> Result<Vec<f64>> {
        (0..self.outputs()).map(|c| self.analytic_derivative(point, c, Partial::value())).collect()
    }

    /// Closed-form pure partial derivative of the analytic solution.
    pub fn analytic_derivative(&self, point: &[f64], channel: usize, partial: Partial) -> Result<f64> {
        if self.source == DataSource::External {
            return Err(Error::Unsupported(format!(
                "{} on external data has no closed-form solution",
                self.id
            )));
        }
        if point.len() != self.input_dim {
            return Err(Error::Shape(format!("{} expects {} coordinates", self.id, self.input_dim)));
        }
        if channel >= self.outputs() {
            return Err(Error::Shape(format!("{} has {} channels", self.id, self.outputs())));
        }
        let n = partial.order as i32;
        let axis = if n == 0 { usize::MAX } else { partial.axis };
        // d^n/ds^n sin(a s) = a^n sin(a s + n pi/2); likewise for cos
        let sin_d = |a: f64, s: f64, k: i32| a.powi(k) * (a * s + k as f64 * FRAC_PI_2).sin();
        let cos_d = |a: f64, s: f64, k: i32| a.powi(k) * (a * s + k as f64 * FRAC_PI_2).cos();
        let order_on = |ax: usize| if axis == ax { n } else { 0 };
        Ok(match self.id {
            ProblemId::Heat => {
                let (x, t) = (point[0], point[1]);
                let k = 10.0 * PI;
                let rate = (k * HEAT_BETA).powi(2);
                (-rate).powi(order_on(1)) * (-rate * t).exp() * sin_d(k, x, order_on(0))
            }
            ProblemId::Wave => {
                let (x, t) = (point[0], point[1]);
                let mode = |a: f64, amp: f64| {
                    amp * sin_d(a, x, order_on(0)) * cos_d(WAVE_C * a, t, order_on(1))
                };
                mode(PI, 1.0) + mode(4.0 * PI, 0.5)
            }
            ProblemId::Beam => {
                let (x, t) = (point[0], point[1]);
                sin_d(PI, x, order_on(0)) * cos_d(BEAM_ALPHA * PI * PI, t, order_on(1))
            }
            ProblemId::NavierStokes => {
                let (x, y, t) = (point[0], point[1], point[2]);
                let decay = |rate: f64| rate.powi(order_on(2)) * (rate * t).exp();
                match channel {
                    0 => -cos_d(1.0, x, order_on(0)) * sin_d(1.0, y, order_on(1)) * decay(-2.0 * NS_BETA2),
                    1 => sin_d(1.0, x, order_on(0)) * cos_d(1.0, y, order_on(1)) * decay(-2.0 * NS_BETA2),
                    _ => {
                        let spatial = match axis {
                            0 => cos_d(2.0, x, n),
                            1 => cos_d(2.0, y, n),
                            _ => (2.0 * x).cos() + (2.0 * y).cos(),
                        };
                        -0.25 * spatial * decay(-4.0 * NS_BETA2)
                    }
                }
            }
        })
    }

    /// Closed-form bundle for every entry of `spec`.
    pub fn analytic_bundle(&self, point: &[f64], spec: &DerivSpec) -> Result<DerivBundle> {
        let outputs = self.analytic_solution(point)?;
        let entries = spec
            .requests()
            .iter()
            .map(|&(c, p)| self.analytic_derivative(point, c, p).map(|v| ((c, p), v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DerivBundle { outputs, entries })
    }

    pub fn on_manifold(&self, point: &[f64], manifold: Manifold) -> bool {
        const TOL: f64 = 1e-12;
        match manifold {
            Manifold::Initial => (point[self.time_axis()] - self.domain[self.time_axis()].0).abs() <= TOL,
            Manifold::Boundary => {
                let (lo, hi) = self.domain[0];
                (point[0] - lo).abs() <= TOL || (point[0] - hi).abs() <= TOL
            }
        }
    }

    fn condition_values(&self, point: &[f64], manifold: Manifold) -> Result<Vec<(TermId, f64)>> {
        if point.len() != self.input_dim {
            return Err(Error::Shape(format!("{} expects {} coordinates", self.id, self.input_dim)));
        }
        if !self.on_manifold(point, manifold) {
            return Err(Error::Config(format!("point {point:?} is not on the {manifold:?} manifold")));
        }
        Ok(self
            .conditions
            .iter()
            .filter(|c| c.manifold == manifold)
            .map(|c| (c.term, (c.target)(point)))
            .collect())
    }

    /// Initial-condition targets at a point with `t` at its lower bound.
    pub fn ic_values(&self, point: &[f64]) -> Result<Vec<(TermId, f64)>> {
        self.condition_values(point, Manifold::Initial)
    }

    /// Boundary-condition targets at a point on the spatial boundary.
    pub fn bc_values(&self, point: &[f64]) -> Result<Vec<(TermId, f64)>> {
        self.condition_values(point, Manifold::Boundary)
    }
}

/// Taylor–Green vortex `(u, v, p)` at `(x, y, t)` for viscosity `viscosity`.
/// It satisfies the incompressible Navier–Stokes equations with unit
/// convection coefficient.
pub fn taylor_green(point: [f64; 3], viscosity: f64) -> [f64; 3] {
    let [x, y, t] = point;
    let f = (-2.0 * viscosity * t).exp();
    let u = -x.cos() * y.sin() * f;
    let v = x.sin() * y.cos() * f;
    let p = -0.25 * ((2.0 * x).cos() + (2.0 * y).cos()) * f * f;
    [u, v, p]
}

/// One observed sample: coordinates and field values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub coords: Vec<f64>,
    pub values: Vec<f64>,
}

/// Reads whitespace-separated `x y t u v p` rows; lines starting with `#`
/// and blank lines are skipped.
pub fn read_ns_columns<R: BufRead>(reader: R) -> Result<Vec<FieldSample>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if nums.len() != 6 {
            return Err(Error::Parse(format!(
                "line {}: expected 6 columns (x y t u v p), found {}",
                lineno + 1,
                nums.len()
            )));
        }
        out.push(FieldSample { coords: nums[..3].to_vec(), values: nums[3..].to_vec() });
    }
    if out.is_empty() {
        return Err(Error::Parse("no samples found".into()));
    }
    Ok(out)
}

/// Writes samples as whitespace-separated columns with a `#` header naming them.
pub fn write_columns<W: Write>(mut w: W, names: &[&str], samples: &[FieldSample]) -> Result<()> {
    writeln!(w, "# {}", names.join(" "))?;
    for s in samples {
        let row: Vec<String> =
            s.coords.iter().chain(&s.values).map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}
