//! Exact input derivatives of the network (up to 4th order) and reverse-mode
//! gradients of losses built from them.
//!
//! Input derivatives are obtained by pushing truncated univariate Taylor
//! series through the layer recurrence, one series per differentiated input
//! axis, with the tanh coefficients generated from `tanh' = 1 - tanh^2`.
//! Every batched evaluation is recorded on a [`Tape`], and a single reverse
//! sweep over the tape yields the gradient with respect to both the network
//! parameters and the unknown PDE coefficients.

mod batch;
mod gemm;
mod tape;
mod taylor;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use batch::{BatchRecording, ColumnLayout};
pub use tape::{Gradient, NetOutputs, Tape, Var};
pub use taylor::MAX_ORDER;

use crate::error::{Error, Result};
use crate::mlp::NetworkParams;

/// A pure partial derivative along one input axis (order 0 is the value).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Partial {
    pub axis: usize,
    pub order: u8,
}

impl Partial {
    pub const fn value() -> Self {
        Self { axis: 0, order: 0 }
    }

    pub const fn d(axis: usize, order: u8) -> Self {
        if order == 0 {
            Self::value()
        } else {
            Self { axis, order }
        }
    }

    /// Converts a multi-index (one order per input axis). Mixed partials
    /// are rejected.
    pub fn from_multi_index(index: &[u8]) -> Result<Self> {
        let nonzero: Vec<(usize, u8)> =
            index.iter().copied().enumerate().filter(|&(_, o)| o > 0).collect();
        match nonzero.as_slice() {
            [] => Ok(Self::value()),
            [(axis, order)] => {
                if *order as usize > MAX_ORDER {
                    return Err(Error::UnsupportedDerivative(format!(
                        "order {order} exceeds {MAX_ORDER}"
                    )));
                }
                Ok(Self::d(*axis, *order))
            }
            _ => Err(Error::UnsupportedDerivative(format!(
                "mixed partial {index:?} is not supported"
            ))),
        }
    }

    pub fn factorial(&self) -> f64 {
        (1..=self.order as u32).product::<u32>() as f64
    }
}

impl fmt::Display for Partial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.order == 0 {
            write!(f, "value")
        } else {
            write!(f, "d^{}/dx{}^{}", self.order, self.axis, self.order)
        }
    }
}

/// Requested (output channel, partial) entries for a network with a given
/// input and output width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivSpec {
    input_dim: usize,
    outputs: usize,
    requests: Vec<(usize, Partial)>,
}

impl DerivSpec {
    pub fn new(input_dim: usize, outputs: usize, requests: Vec<(usize, Partial)>) -> Result<Self> {
        for &(channel, p) in &requests {
            if channel >= outputs {
                return Err(Error::Shape(format!("channel {channel} but only {outputs} outputs")));
            }
            if p.order as usize > MAX_ORDER {
                return Err(Error::UnsupportedDerivative(format!(
                    "order {} exceeds {MAX_ORDER}",
                    p.order
                )));
            }
            if p.order > 0 && p.axis >= input_dim {
                return Err(Error::Shape(format!("axis {} but only {input_dim} inputs", p.axis)));
            }
        }
        let mut requests = requests;
        requests.sort();
        requests.dedup();
        Ok(Self { input_dim, outputs, requests })
    }

    /// Values of every output channel and nothing else.
    pub fn values_only(input_dim: usize, outputs: usize) -> Self {
        let requests = (0..outputs).map(|c| (c, Partial::value())).collect();
        Self { input_dim, outputs, requests }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn requests(&self) -> &[(usize, Partial)] {
        &self.requests
    }

    pub fn max_order(&self) -> u8 {
        self.requests.iter().map(|(_, p)| p.order).max().unwrap_or(0)
    }

    /// Union of two specs over the same network shape.
    pub fn merged(&self, other: &DerivSpec) -> Result<DerivSpec> {
        if self.input_dim != other.input_dim || self.outputs != other.outputs {
            return Err(Error::Shape("cannot merge specs of different shapes".into()));
        }
        let mut req = self.requests.clone();
        req.extend_from_slice(&other.requests);
        DerivSpec::new(self.input_dim, self.outputs, req)
    }
}

/// Lookup of derivative entries by (channel, partial), for plain numbers or
/// recorded tape variables.
pub trait BundleLookup<T> {
    fn entry(&self, channel: usize, partial: Partial) -> Result<T>;
}

/// Network outputs at one point plus the requested input derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivBundle {
    pub outputs: Vec<f64>,
    pub entries: Vec<((usize, Partial), f64)>,
}

impl DerivBundle {
    pub fn get(&self, channel: usize, partial: Partial) -> Result<f64> {
        self.entries
            .iter()
            .find(|(k, _)| *k == (channel, partial))
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::MissingEntry(format!("channel {channel}, {partial}")))
    }
}

impl BundleLookup<f64> for DerivBundle {
    fn entry(&self, channel: usize, partial: Partial) -> Result<f64> {
        self.get(channel, partial)
    }
}

/// Evaluates the network and the partials listed in `spec` at one point.
pub fn eval_with_input_derivatives(
    params: &NetworkParams,
    point: &[f64],
    spec: &DerivSpec,
) -> Result<DerivBundle> {
    if point.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "point has {} coordinates, network expects {}",
            point.len(),
            params.input_dim()
        )));
    }
    let rec = BatchRecording::forward(params, point, spec)?;
    let outputs = (0..params.output_dim())
        .map(|c| rec.entry(c, Partial::value()).map(|v| v[0]))
        .collect::<Result<Vec<_>>>()?;
    let entries = spec
        .requests()
        .iter()
        .map(|&(c, p)| rec.entry(c, p).map(|v| ((c, p), v[0])))
        .collect::<Result<Vec<_>>>()?;
    Ok(DerivBundle { outputs, entries })
}

/// Network outputs at every point of `coords` (row-major `points x
/// input_dim`), returned row-major `points x outputs`.
pub fn predict(params: &NetworkParams, coords: &[f64]) -> Result<Vec<f64>> {
    let spec = DerivSpec::values_only(params.input_dim(), params.output_dim());
    let rec = BatchRecording::forward(params, coords, &spec)?;
    let m = params.output_dim();
    let cols = (0..m).map(|c| rec.entry(c, Partial::value())).collect::<Result<Vec<_>>>()?;
    Ok((0..rec.points()).flat_map(|p| cols.iter().map(move |c| c[p])).collect())
}

/// Central-difference gradient, one coordinate at a time.
pub fn fd_gradient<F>(mut f: F, at: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x)?;
        x[i] = orig - step;
        let fm = f(&x)?;
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::init_network;

    #[test]
    fn identity_network_has_unit_slope() {
        let mut p = NetworkParams::zeros(&[1, 1, 1]).unwrap();
        // tiny input weight keeps tanh in its linear regime; rescale on output
        p.weights_mut(0)[0] = 1e-6;
        p.weights_mut(1)[0] = 1e6;
        let spec = DerivSpec::new(1, 1, vec![(0, Partial::d(0, 1))]).unwrap();
        for x in [-0.7, 0.0, 0.3] {
            let b = eval_with_input_derivatives(&p, &[x], &spec).unwrap();
            assert!((b.get(0, Partial::d(0, 1)).unwrap() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_neuron_slope_at_origin() {
        let mut p = NetworkParams::zeros(&[1, 1, 1]).unwrap();
        p.weights_mut(0)[0] = 0.8;
        p.weights_mut(1)[0] = 1.0;
        let spec = DerivSpec::new(1, 1, vec![(0, Partial::d(0, 1))]).unwrap();
        let b = eval_with_input_derivatives(&p, &[0.0], &spec).unwrap();
        assert_eq!(b.get(0, Partial::d(0, 1)).unwrap(), 0.8);
        // zero input weight: flat
        p.weights_mut(0)[0] = 0.0;
        let b = eval_with_input_derivatives(&p, &[0.0], &spec).unwrap();
        assert_eq!(b.get(0, Partial::d(0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn random_network_matches_finite_differences() {
        let p = init_network(&[2, 16, 1], 1).unwrap();
        let spec = DerivSpec::new(2, 1, vec![(0, Partial::d(1, 1)), (0, Partial::d(0, 2))]).unwrap();
        let (x, t) = (0.3, 0.4);
        let b = eval_with_input_derivatives(&p, &[x, t], &spec).unwrap();
        let f = |x: f64, t: f64| p.forward(&[x, t]).unwrap()[0];
        let h = 1e-4;
        let ut = (f(x, t + h) - f(x, t - h)) / (2.0 * h);
        let uxx = (f(x + h, t) - 2.0 * f(x, t) + f(x - h, t)) / (h * h);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-8);
        assert!(rel(b.get(0, Partial::d(1, 1)).unwrap(), ut) < 1e-6);
        assert!(rel(b.get(0, Partial::d(0, 2)).unwrap(), uxx) < 1e-6);
        assert!(rel(b.outputs[0], f(x, t)) < 1e-14);
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(
            DerivSpec::new(2, 1, vec![(0, Partial { axis: 0, order: 5 })]),
            Err(Error::UnsupportedDerivative(_))
        ));
        assert!(matches!(DerivSpec::new(2, 1, vec![(0, Partial::d(2, 1))]), Err(Error::Shape(_))));
        assert!(matches!(DerivSpec::new(2, 1, vec![(1, Partial::value())]), Err(Error::Shape(_))));
        assert!(matches!(
            Partial::from_multi_index(&[1, 1]),
            Err(Error::UnsupportedDerivative(_))
        ));
        assert!(matches!(Partial::from_multi_index(&[0, 5]), Err(Error::UnsupportedDerivative(_))));
        assert_eq!(Partial::from_multi_index(&[0, 2]).unwrap(), Partial::d(1, 2));
    }

    #[test]
    fn overflow_names_the_node() {
        let mut p = NetworkParams::zeros(&[1, 2, 1]).unwrap();
        p.weights_mut(0)[0] = f64::MAX;
        let spec = DerivSpec::values_only(1, 1);
        let err = eval_with_input_derivatives(&p, &[10.0], &spec).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("hidden layer 0"), "{msg}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn batched_prediction_matches_pointwise() {
        let p = init_network(&[3, 7, 5, 2], 4).unwrap();
        let coords = [0.1, 0.2, 0.3, -1.0, 0.5, 2.0, 0.0, 0.0, 0.0];
        let out = predict(&p, &coords).unwrap();
        for (pt, row) in coords.chunks(3).zip(out.chunks(2)) {
            let want = p.forward(pt).unwrap();
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fd_gradient_simple_functions() {
        let g = fd_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
        let g = fd_gradient(|x| Ok(x[0].sin()), &[0.0], 1e-4).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
        assert!(fd_gradient(|x| Ok(x[0]), &[0.0], 0.0).is_err());
    }
}
