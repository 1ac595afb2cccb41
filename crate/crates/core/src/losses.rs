//! Loss terms, the composite loss and the loss-trace CSV.
//!
//! Every term is the mean of a squared per-sample quantity (a residual, an
//! initial/boundary operator mismatch, or a data mismatch). All requested
//! terms are recorded on one tape so a single reverse sweep yields the
//! gradient of the weighted total.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_engine::{DerivSpec, Gradient, Partial, Tape, Var};
use crate::mlp::TrainableState;
use crate::pde_suite::{Manifold, Problem};
use crate::sampling::DatasetBundle;

/// Identifier of one loss term. The order is the canonical reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermId {
    R,
    R1,
    R2,
    R3,
    I,
    I1,
    I2,
    B,
    B1,
    B2,
    D,
    D1,
    D2,
}

impl TermId {
    pub const ALL: [TermId; 13] = [
        TermId::R,
        TermId::R1,
        TermId::R2,
        TermId::R3,
        TermId::I,
        TermId::I1,
        TermId::I2,
        TermId::B,
        TermId::B1,
        TermId::B2,
        TermId::D,
        TermId::D1,
        TermId::D2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TermId::R => "r",
            TermId::R1 => "r1",
            TermId::R2 => "r2",
            TermId::R3 => "r3",
            TermId::I => "i",
            TermId::I1 => "i1",
            TermId::I2 => "i2",
            TermId::B => "b",
            TermId::B1 => "b1",
            TermId::B2 => "b2",
            TermId::D => "d",
            TermId::D1 => "d1",
            TermId::D2 => "d2",
        }
    }

    pub fn is_data(&self) -> bool {
        matches!(self, TermId::D | TermId::D1 | TermId::D2)
    }
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TermId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TermId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown loss term '{s}'")))
    }
}

/// Multipliers of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub BTreeMap<TermId, f64>);

impl LossWeights {
    pub fn uniform(terms: &[TermId]) -> Self {
        Self(terms.iter().map(|&t| (t, 1.0)).collect())
    }

    pub fn get(&self, term: TermId) -> Option<f64> {
        self.0.get(&term).copied()
    }

    pub fn terms(&self) -> Vec<TermId> {
        self.0.keys().copied().collect()
    }

    fn validate(&self) -> Result<()> {
        for (t, &w) in &self.0 {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("weight of term {t} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-term mean-squared values and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: BTreeMap<TermId, f64>,
    pub total: f64,
}

struct ConditionSet {
    coords: Vec<f64>,
    spec: DerivSpec,
    /// (term, operator, per-point target)
    targets: Vec<(TermId, Partial, Vec<f64>)>,
}

/// Training sets arranged for loss evaluation.
pub struct LossData {
    problem: Problem,
    residual: Vec<f64>,
    initial: Option<ConditionSet>,
    boundary: Option<ConditionSet>,
    data: Vec<f64>,
    /// One column of observations per data term.
    observations: Vec<(TermId, usize, Vec<f64>)>,
}

impl LossData {
    pub fn new(problem: &Problem, bundle: &DatasetBundle) -> Result<Self> {
        if bundle.input_dim != problem.input_dim || bundle.channels != problem.outputs() {
            return Err(Error::Shape(format!("dataset does not match problem {}", problem.id)));
        }
        let d = problem.input_dim;
        let condition_set = |coords: &[f64], manifold: Manifold| -> Result<Option<ConditionSet>> {
            let conds: Vec<_> = problem.conditions.iter().filter(|c| c.manifold == manifold).collect();
            if conds.is_empty() {
                return Ok(None);
            }
            if coords.is_empty() {
                return Err(Error::Config(format!("{} needs {manifold:?} points", problem.id)));
            }
            let mut targets: Vec<(TermId, Partial, Vec<f64>)> =
                conds.iter().map(|c| (c.term, c.partial, Vec::new())).collect();
            for point in coords.chunks_exact(d) {
                let values = match manifold {
                    Manifold::Initial => problem.ic_values(point)?,
                    Manifold::Boundary => problem.bc_values(point)?,
                };
                for ((_, _, col), (_, v)) in targets.iter_mut().zip(values) {
                    col.push(v);
                }
            }
            Ok(Some(ConditionSet { coords: coords.to_vec(), spec: problem.condition_spec(manifold), targets }))
        };
        let c = bundle.channels;
        let observations = problem
            .data_terms()
            .into_iter()
            .zip(&problem.data_channels)
            .map(|(t, &ch)| (t, ch, bundle.data_values.iter().skip(ch).step_by(c).copied().collect()))
            .collect();
        if bundle.residual.is_empty() || bundle.data.is_empty() {
            return Err(Error::Config("residual and data sets must be non-empty".into()));
        }
        Ok(Self {
            problem: problem.clone(),
            residual: bundle.residual.clone(),
            initial: condition_set(&bundle.initial, Manifold::Initial)?,
            boundary: condition_set(&bundle.boundary, Manifold::Boundary)?,
            data: bundle.data.clone(),
            observations,
        })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    /// Number of samples behind a term.
    pub fn count(&self, term: TermId) -> usize {
        let d = self.problem.input_dim;
        let cond = |s: &Option<ConditionSet>| {
            s.as_ref().filter(|s| s.targets.iter().any(|(t, _, _)| *t == term)).map(|s| s.coords.len() / d)
        };
        if self.problem.residual_terms.contains(&term) {
            self.residual.len() / d
        } else if term.is_data() {
            self.data.len() / d
        } else {
            cond(&self.initial).or_else(|| cond(&self.boundary)).unwrap_or(0)
        }
    }

    /// Records the per-sample columns of the requested terms on `tape`.
    pub fn record_columns<'t>(&self, tape: &'t Tape, wanted: &[TermId]) -> Result<Vec<(TermId, Var<'t>)>> {
        let p = &self.problem;
        let valid = p.term_ids();
        if let Some(t) = wanted.iter().find(|t| !valid.contains(t)) {
            return Err(Error::Config(format!("term {t} does not belong to {}", p.id)));
        }
        let want = |t: &TermId| wanted.contains(t);
        let mut out = Vec::new();
        if p.residual_terms.iter().any(want) {
            let net = tape.network(&self.residual, &p.residual_spec)?;
            let gamma = tape.gammas();
            let r = p.residual(&net, &gamma)?;
            out.extend(p.residual_terms.iter().copied().zip(r).filter(|(t, _)| want(t)));
        }
        for set in [&self.initial, &self.boundary].into_iter().flatten() {
            if !set.targets.iter().any(|(t, _, _)| want(t)) {
                continue;
            }
            let net = tape.network(&set.coords, &set.spec)?;
            for (t, partial, target) in set.targets.iter().filter(|(t, _, _)| want(t)) {
                let v = net.get(0, *partial)?;
                let col = if target.iter().all(|&x| x == 0.0) { v } else { v - tape.column(target.clone()) };
                out.push((*t, col));
            }
        }
        if self.observations.iter().any(|(t, _, _)| want(t)) {
            let spec = DerivSpec::values_only(p.input_dim, p.outputs());
            let net = tape.network(&self.data, &spec)?;
            for (t, ch, obs) in self.observations.iter().filter(|(t, _, _)| want(t)) {
                out.push((*t, net.get(*ch, Partial::value())? - tape.column(obs.clone())));
            }
        }
        out.sort_by_key(|(t, _)| *t);
        Ok(out)
    }
}

/// A weighted sum of loss terms over fixed training sets.
pub struct Objective<'a> {
    data: &'a LossData,
    weights: LossWeights,
}

impl<'a> Objective<'a> {
    /// The full composite loss; `weights` must cover exactly the problem's terms.
    pub fn composite(data: &'a LossData, weights: LossWeights) -> Result<Self> {
        let mut expected = data.problem.term_ids();
        expected.sort();
        if weights.terms() != expected {
            return Err(Error::Config(format!(
                "weights cover {:?}, problem {} needs {:?}",
                weights.terms().iter().map(|t| t.as_str()).collect::<Vec<_>>(),
                data.problem.id,
                expected.iter().map(|t| t.as_str()).collect::<Vec<_>>()
            )));
        }
        weights.validate()?;
        Ok(Self { data, weights })
    }

    /// Unit-weighted sum of the data terms.
    pub fn data_only(data: &'a LossData) -> Self {
        Self { data, weights: LossWeights::uniform(&data.problem.data_terms()) }
    }

    /// Any subset of terms with given weights.
    pub fn subset(data: &'a LossData, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Self { data, weights })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    fn record<'t>(&self, tape: &'t Tape) -> Result<(LossBreakdown, Var<'t>)> {
        let cols = self.data.record_columns(tape, &self.weights.terms())?;
        let mut terms = BTreeMap::new();
        let mut total: Option<Var<'t>> = None;
        for (t, col) in cols {
            let term = col.square().mean();
            terms.insert(t, term.scalar().expect("mean is scalar"));
            let weighted = term * self.weights.0[&t];
            total = Some(match total {
                None => weighted,
                Some(acc) => acc + weighted,
            });
        }
        let total = total.ok_or_else(|| Error::Config("objective has no terms".into()))?;
        let value = total.scalar().expect("sum of scalars");
        Ok((LossBreakdown { terms, total: value }, total))
    }

    pub fn value(&self, state: &TrainableState) -> Result<LossBreakdown> {
        let tape = Tape::new(state);
        self.record(&tape).map(|(b, _)| b)
    }

    pub fn value_and_gradient(&self, state: &TrainableState) -> Result<(LossBreakdown, Gradient)> {
        let tape = Tape::new(state);
        let (b, total) = self.record(&tape)?;
        if !b.total.is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", b.total)));
        }
        let g = tape.backward(total)?;
        Ok((b, g))
    }
}

fn single_term(state: &TrainableState, data: &LossData, term: TermId) -> Result<f64> {
    Objective::subset(data, LossWeights::uniform(&[term]))?.value(state).map(|b| b.total)
}

/// Data loss per data term plus their sum.
pub fn data_loss(state: &TrainableState, data: &LossData) -> Result<LossBreakdown> {
    Objective::data_only(data).value(state)
}

/// Mean squared residual(s).
pub fn residual_loss(state: &TrainableState, data: &LossData) -> Result<LossBreakdown> {
    Objective::subset(data, LossWeights::uniform(&data.problem.residual_terms))?.value(state)
}

/// Mean squared mismatch of one initial or boundary operator.
pub fn condition_loss(state: &TrainableState, data: &LossData, term: TermId) -> Result<f64> {
    if !data.problem.conditions.iter().any(|c| c.term == term) {
        return Err(Error::Config(format!("{} has no condition term {term}", data.problem.id)));
    }
    single_term(state, data, term)
}

/// All terms and the weighted total.
pub fn composite(state: &TrainableState, data: &LossData, weights: &LossWeights) -> Result<LossBreakdown> {
    Objective::composite(data, weights.clone())?.value(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Phase::Adam),
            "lbfgs" => Ok(Phase::Lbfgs),
            _ => Err(Error::Parse(format!("unknown phase '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub phase: Phase,
    pub term: TermId,
    pub value: f64,
    pub weighted_total: f64,
    pub wallclock_s: f64,
}

/// Loss history, one row per (iteration, term).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "iter,phase,term_id,value,weighted_total,wallclock_s";

impl LossTrace {
    pub fn push(&mut self, iter: usize, phase: Phase, b: &LossBreakdown, wallclock_s: f64) {
        for (&term, &value) in &b.terms {
            self.rows.push(TraceRow { iter, phase, term, value, weighted_total: b.total, wallclock_s });
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:e},{:e},{:.6}",
                r.iter,
                r.phase.as_str(),
                r.term,
                r.value,
                r.weighted_total,
                r.wallclock_s
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == TRACE_HEADER => {}
            _ => return Err(Error::Parse("missing loss-trace header".into())),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("trace line {}: expected 6 fields", n + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("trace line {}: {e}", n + 2)));
            rows.push(TraceRow {
                iter: f[0].parse().map_err(|e| Error::Parse(format!("trace line {}: {e}", n + 2)))?,
                phase: f[1].parse()?,
                term: f[2].parse()?,
                value: num(f[3])?,
                weighted_total: num(f[4])?,
                wallclock_s: num(f[5])?,
            });
        }
        Ok(Self { rows })
    }
}
