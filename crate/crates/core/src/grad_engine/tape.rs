//! Reverse-mode tape over per-point columns.
//!
//! Nodes hold either a scalar or a column (one value per point of a batch).
//! Leaves are the unknown PDE coefficients, constants, and entries of recorded
//! network batches; the network batches themselves are swept in reverse as
//! single units once the adjoints of their entries are known.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};

use super::batch::BatchRecording;
use super::{BundleLookup, DerivSpec, Partial};
use crate::error::{Error, Result};
use crate::mlp::{NetworkParams, TrainableState};

const REDUCE_CHUNK: usize = 1024;

#[derive(Debug, Clone)]
enum Val {
    Scalar(f64),
    Column(Vec<f64>),
}

impl Val {
    fn len(&self) -> Option<usize> {
        match self {
            Val::Scalar(_) => None,
            Val::Column(c) => Some(c.len()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Const,
    Gamma(usize),
    Net { batch: usize, channel: usize, block: usize, scale: f64 },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Square(usize),
    Mean(usize),
    Sum(usize),
}

struct Node {
    value: Val,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    batches: Vec<BatchRecording>,
}

/// Records one loss evaluation against a fixed parameter state.
pub struct Tape {
    network: NetworkParams,
    gamma: Vec<f64>,
    inner: RefCell<Inner>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradient over the full trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub network: Vec<f64>,
    pub inverse: Vec<f64>,
}

impl Gradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.network.clone();
        v.extend_from_slice(&self.inverse);
        v
    }
}

/// Entries of one recorded network batch, as tape variables.
pub struct NetOutputs<'t> {
    entries: Vec<((usize, Partial), Var<'t>)>,
    points: usize,
}

impl<'t> NetOutputs<'t> {
    pub fn points(&self) -> usize {
        self.points
    }

    pub fn get(&self, channel: usize, partial: Partial) -> Result<Var<'t>> {
        self.entries
            .iter()
            .find(|(k, _)| *k == (channel, partial))
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::MissingEntry(format!("channel {channel}, {partial}")))
    }
}

impl<'t> BundleLookup<Var<'t>> for NetOutputs<'t> {
    fn entry(&self, channel: usize, partial: Partial) -> Result<Var<'t>> {
        self.get(channel, partial)
    }
}

fn chunked_sum(values: &[f64]) -> f64 {
    values.chunks(REDUCE_CHUNK).map(|c| c.iter().sum::<f64>()).fold(0.0, |acc, s| acc + s)
}

impl Tape {
    pub fn new(state: &TrainableState) -> Self {
        Self::with_params(state.network.clone(), state.inverse.values.clone())
    }

    pub fn with_params(network: NetworkParams, gamma: Vec<f64>) -> Self {
        Self { network, gamma, inner: RefCell::new(Inner::default()) }
    }

    pub fn network_params(&self) -> &NetworkParams {
        &self.network
    }

    fn push(&self, value: Val, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        Var { tape: self, idx: inner.nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gamma(&self, i: usize) -> Var<'_> {
        self.push(Val::Scalar(self.gamma[i]), Op::Gamma(i))
    }

    pub fn gammas(&self) -> Vec<Var<'_>> {
        (0..self.gamma.len()).map(|i| self.gamma(i)).collect()
    }

    pub fn constant(&self, v: f64) -> Var<'_> {
        self.push(Val::Scalar(v), Op::Const)
    }

    pub fn column(&self, v: Vec<f64>) -> Var<'_> {
        self.push(Val::Column(v), Op::Const)
    }

    /// Evaluates the network (and the partials in `spec`) at every point of
    /// `coords` (row-major, `points x input_dim`) and records the batch.
    pub fn network(&self, coords: &[f64], spec: &DerivSpec) -> Result<NetOutputs<'_>> {
        let rec = BatchRecording::forward(&self.network, coords, spec)?;
        let points = rec.points();
        let columns = spec
            .requests()
            .iter()
            .map(|&(c, p)| {
                let block = rec.layout().block_of(p).expect("layout covers every request");
                rec.entry(c, p).map(|v| ((c, p), block, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = {
            let mut inner = self.inner.borrow_mut();
            inner.batches.push(rec);
            inner.batches.len() - 1
        };
        let entries = columns
            .into_iter()
            .map(|((c, p), block, v)| {
                let op = Op::Net { batch, channel: c, block, scale: p.factorial() };
                ((c, p), self.push(Val::Column(v), op))
            })
            .collect();
        Ok(NetOutputs { entries, points })
    }

    fn binary(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Val {
        let inner = self.inner.borrow();
        match (&inner.nodes[a].value, &inner.nodes[b].value) {
            (Val::Scalar(x), Val::Scalar(y)) => Val::Scalar(f(*x, *y)),
            (Val::Scalar(x), Val::Column(y)) => Val::Column(y.iter().map(|y| f(*x, *y)).collect()),
            (Val::Column(x), Val::Scalar(y)) => Val::Column(x.iter().map(|x| f(*x, *y)).collect()),
            (Val::Column(x), Val::Column(y)) => {
                assert_eq!(x.len(), y.len(), "tape: column length mismatch");
                Val::Column(x.iter().zip(y).map(|(x, y)| f(*x, *y)).collect())
            }
        }
    }

    fn unary(&self, a: usize, f: impl Fn(f64) -> f64) -> Val {
        match &self.inner.borrow().nodes[a].value {
            Val::Scalar(x) => Val::Scalar(f(*x)),
            Val::Column(x) => Val::Column(x.iter().map(|x| f(*x)).collect()),
        }
    }

    /// Gradient of the scalar `loss` with respect to the network parameters
    /// and the unknown coefficients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradient> {
        self.check_owner(loss)?;
        let inner = self.inner.borrow();
        if !matches!(inner.nodes[loss.idx].value, Val::Scalar(_)) {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        if let Val::Scalar(v) = inner.nodes[loss.idx].value {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss value {v}")));
            }
        }
        let sweep = self.sweep(&inner, loss.idx, Val::Scalar(1.0), true)?;
        let mut network = vec![0.0; self.network.len()];
        for (batch, seed) in inner.batches.iter().zip(&sweep.seeds) {
            if let Some(seed) = seed {
                batch.backward(&self.network, seed, &mut network);
            }
        }
        let inverse = sweep
            .gamma
            .iter()
            .map(|g| match g {
                None => 0.0,
                Some(Val::Scalar(v)) => *v,
                Some(Val::Column(c)) => chunked_sum(c),
            })
            .collect();
        Ok(Gradient { network, inverse })
    }

    /// For a column `target` whose entries depend on distinct points, returns
    /// the squared norm of each entry's gradient over the full state. The
    /// column may draw on a single network batch only.
    pub fn per_point_sq_norms(&self, target: Var<'_>) -> Result<Vec<f64>> {
        self.check_owner(target)?;
        let inner = self.inner.borrow();
        let n = match &inner.nodes[target.idx].value {
            Val::Column(c) => c.len(),
            Val::Scalar(_) => return Err(Error::Usage("per-point norms need a column".into())),
        };
        let sweep = self.sweep(&inner, target.idx, Val::Column(vec![1.0; n]), false)?;
        let mut norms = vec![0.0; n];
        let mut used = 0;
        for (batch, seed) in inner.batches.iter().zip(&sweep.seeds) {
            if let Some(seed) = seed {
                used += 1;
                if batch.points() != n {
                    return Err(Error::Usage("target length differs from its batch".into()));
                }
                norms = batch.per_point_sq_norms(&self.network, seed);
            }
        }
        if used > 1 {
            return Err(Error::Usage("per-point norms across several batches".into()));
        }
        for g in sweep.gamma.iter().flatten() {
            match g {
                Val::Column(c) => norms.iter_mut().zip(c).for_each(|(s, g)| *s += g * g),
                Val::Scalar(v) => norms.iter_mut().for_each(|s| *s += v * v),
            }
        }
        Ok(norms)
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(Error::Usage("variable belongs to another tape".into()));
        }
        if v.idx >= self.len() {
            return Err(Error::Usage("variable was not recorded".into()));
        }
        Ok(())
    }

    fn sweep(&self, inner: &Inner, root: usize, seed: Val, reduce: bool) -> Result<Sweep> {
        let nodes = &inner.nodes;
        let mut adj: Vec<Option<Val>> = vec![None; root + 1];
        adj[root] = Some(seed);
        let mut out = Sweep {
            seeds: vec![None; inner.batches.len()],
            gamma: vec![None; self.gamma.len()],
        };
        let value = |i: usize| &nodes[i].value;
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            match nodes[i].op {
                Op::Const => {}
                Op::Gamma(k) => accumulate(&mut out.gamma[k], g, value(i), reduce),
                Op::Net { batch, channel, block, scale } => {
                    let rec = &inner.batches[batch];
                    let pts = rec.points();
                    let m = rec.output_dim();
                    let seed = out.seeds[batch]
                        .get_or_insert_with(|| vec![0.0; rec.layout().blocks() * pts * m]);
                    let g = broadcast(g, pts);
                    for (p, gp) in g.iter().enumerate() {
                        seed[(block * pts + p) * m + channel] += scale * gp;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a], g.clone(), value(a), reduce);
                    accumulate(&mut adj[b], g, value(b), reduce);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a], g.clone(), value(a), reduce);
                    accumulate(&mut adj[b], map(g, |x| -x), value(b), reduce);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut adj[a], product(&g, value(b)), value(a), reduce);
                    accumulate(&mut adj[b], product(&g, value(a)), value(b), reduce);
                }
                Op::Neg(a) => accumulate(&mut adj[a], map(g, |x| -x), value(a), reduce),
                Op::Scale(a, c) => accumulate(&mut adj[a], map(g, |x| c * x), value(a), reduce),
                Op::Square(a) => {
                    let twice = map(value(a).clone(), |x| 2.0 * x);
                    accumulate(&mut adj[a], product(&g, &twice), value(a), reduce);
                }
                Op::Mean(a) | Op::Sum(a) => {
                    let Val::Scalar(gs) = g else {
                        return Err(Error::Usage("per-point sweep through a reduction".into()));
                    };
                    let n = value(a).len().unwrap_or(1);
                    let gs = if matches!(nodes[i].op, Op::Mean(_)) { gs / n as f64 } else { gs };
                    accumulate(&mut adj[a], Val::Column(vec![gs; n]), value(a), reduce);
                }
            }
        }
        Ok(out)
    }
}

struct Sweep {
    seeds: Vec<Option<Vec<f64>>>,
    gamma: Vec<Option<Val>>,
}

fn map(v: Val, f: impl Fn(f64) -> f64) -> Val {
    match v {
        Val::Scalar(x) => Val::Scalar(f(x)),
        Val::Column(mut c) => {
            c.iter_mut().for_each(|x| *x = f(*x));
            Val::Column(c)
        }
    }
}

fn product(a: &Val, b: &Val) -> Val {
    match (a, b) {
        (Val::Scalar(x), Val::Scalar(y)) => Val::Scalar(x * y),
        (Val::Scalar(x), Val::Column(y)) | (Val::Column(y), Val::Scalar(x)) => {
            Val::Column(y.iter().map(|y| x * y).collect())
        }
        (Val::Column(x), Val::Column(y)) => Val::Column(x.iter().zip(y).map(|(x, y)| x * y).collect()),
    }
}

fn broadcast(v: Val, n: usize) -> Vec<f64> {
    match v {
        Val::Scalar(x) => vec![x; n],
        Val::Column(c) => c,
    }
}

/// Adds `g` into `slot`. A column adjoint flowing into a scalar node is summed
/// when `reduce` is set and kept per point otherwise.
fn accumulate(slot: &mut Option<Val>, g: Val, node_value: &Val, reduce: bool) {
    let g = match (node_value, g) {
        (Val::Scalar(_), Val::Column(c)) if reduce => Val::Scalar(chunked_sum(&c)),
        (_, g) => g,
    };
    *slot = Some(match (slot.take(), g) {
        (None, g) => g,
        (Some(Val::Scalar(a)), Val::Scalar(b)) => Val::Scalar(a + b),
        (Some(Val::Scalar(a)), Val::Column(mut c)) | (Some(Val::Column(mut c)), Val::Scalar(a)) => {
            c.iter_mut().for_each(|x| *x += a);
            Val::Column(c)
        }
        (Some(Val::Column(mut a)), Val::Column(b)) => {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            Val::Column(a)
        }
    });
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The scalar value, or `None` for a column.
    pub fn scalar(&self) -> Option<f64> {
        match self.tape.inner.borrow().nodes[self.idx].value {
            Val::Scalar(v) => Some(v),
            Val::Column(_) => None,
        }
    }

    /// The value as a column (a scalar becomes a one-element column).
    pub fn column(&self) -> Vec<f64> {
        match &self.tape.inner.borrow().nodes[self.idx].value {
            Val::Scalar(v) => vec![*v],
            Val::Column(c) => c.clone(),
        }
    }

    pub fn square(self) -> Var<'t> {
        let v = self.tape.unary(self.idx, |x| x * x);
        self.tape.push(v, Op::Square(self.idx))
    }

    /// Mean over a column, summed in fixed chunks.
    pub fn mean(self) -> Var<'t> {
        let v = match &self.tape.inner.borrow().nodes[self.idx].value {
            Val::Scalar(x) => *x,
            Val::Column(c) => chunked_sum(c) / c.len() as f64,
        };
        self.tape.push(Val::Scalar(v), Op::Mean(self.idx))
    }

    pub fn sum(self) -> Var<'t> {
        let v = match &self.tape.inner.borrow().nodes[self.idx].value {
            Val::Scalar(x) => *x,
            Val::Column(c) => chunked_sum(c),
        };
        self.tape.push(Val::Scalar(v), Op::Sum(self.idx))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.tape.binary(self.idx, rhs.idx, |a, b| a + b);
        self.tape.push(v, Op::Add(self.idx, rhs.idx))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.tape.binary(self.idx, rhs.idx, |a, b| a - b);
        self.tape.push(v, Op::Sub(self.idx, rhs.idx))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.tape.binary(self.idx, rhs.idx, |a, b| a * b);
        self.tape.push(v, Op::Mul(self.idx, rhs.idx))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        let v = self.tape.unary(self.idx, |a| a * c);
        self.tape.push(v, Op::Scale(self.idx, c))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = self.tape.unary(self.idx, |a| -a);
        self.tape.push(v, Op::Neg(self.idx))
    }
}
