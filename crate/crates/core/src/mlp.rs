//! Fully-connected tanh network, its initialization and flat parameter views.
//!
//! Hidden layers apply `tanh(W f + b)`; the output layer is affine. All
//! weights and biases live in one contiguous buffer laid out layer by layer
//! as `W (row-major, fan_out x fan_in)` followed by `b`, which is also the
//! order of the optimizer's flat vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde_suite::Problem;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    widths: Vec<usize>,
    layers: Vec<LayerShape>,
    values: Vec<f64>,
}

/// Hyperbolic tangent, within a few ulp of the libm one but several times
/// faster. Rational form below 0.625, `1 - 2 / (e^2x + 1)` above.
#[inline]
pub fn tanh(x: f64) -> f64 {
    const P: [f64; 3] = [-9.643_991_794_250_523e-1, -9.928_772_310_019_186e1, -1.614_687_684_417_084_5e3];
    const Q: [f64; 3] = [1.128_116_784_916_329_3e2, 2.235_488_390_601_005e3, 4.844_063_053_251_255e3];
    let a = x.abs();
    if a < 0.625 {
        let z = x * x;
        let p = (P[0] * z + P[1]) * z + P[2];
        let q = ((z + Q[0]) * z + Q[1]) * z + Q[2];
        return x + x * z * p / q;
    }
    if a > 22.0 {
        return x.signum();
    }
    let t = 1.0 - 2.0 / ((2.0 * a).exp() + 1.0);
    if x < 0.0 { -t } else { t }
}

fn layout(widths: &[usize]) -> Result<(Vec<LayerShape>, usize)> {
    if widths.len() < 2 {
        return Err(Error::Shape(format!(
            "a network needs at least input and output widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Shape(format!("layer widths must be >= 1, got {widths:?}")));
    }
    let mut offset = 0;
    let layers = widths
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let shape = LayerShape {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            shape
        })
        .collect();
    Ok((layers, offset))
}

/// Number of trainable network parameters for the given layer widths.
pub fn parameter_count(widths: &[usize]) -> Result<usize> {
    layout(widths).map(|(_, n)| n)
}

impl NetworkParams {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let (layers, n) = layout(widths)?;
        Ok(Self { widths: widths.to_vec(), layers, values: vec![0.0; n] })
    }

    pub fn from_flat(widths: &[usize], values: Vec<f64>) -> Result<Self> {
        let (layers, n) = layout(widths)?;
        if values.len() != n {
            return Err(Error::Shape(format!(
                "widths {widths:?} need {n} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self { widths: widths.to_vec(), layers, values })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total parameter count M.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let l = &self.layers[layer];
        &self.values[l.weight_offset..l.bias_offset]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = &self.layers[layer];
        &self.values[l.bias_offset..l.bias_offset + l.fan_out]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layers[layer];
        &mut self.values[l.weight_offset..l.bias_offset]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layers[layer];
        &mut self.values[l.bias_offset..l.bias_offset + l.fan_out]
    }

    /// Plain evaluation of the network at one input point.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut act = input.to_vec();
        for (h, l) in self.layers.iter().enumerate() {
            let w = self.weights(h);
            let b = self.bias(h);
            let mut next: Vec<f64> = (0..l.fan_out)
                .map(|o| {
                    let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                    row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>() + b[o]
                })
                .collect();
            if h < last {
                next.iter_mut().for_each(|v| *v = tanh(*v));
            }
            act = next;
        }
        Ok(act)
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization for weights and
/// biases of every layer, drawn layer by layer in storage order.
pub fn init_network(widths: &[usize], seed: u64) -> Result<NetworkParams> {
    let mut params = NetworkParams::zeros(widths)?;
    let mut rng = rng::seeded(seed, Stream::NetworkInit);
    let layers = params.layers.clone();
    for l in layers {
        let bound = 1.0 / (l.fan_in as f64).sqrt();
        let end = l.bias_offset + l.fan_out;
        for v in &mut params.values[l.weight_offset..end] {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// Unknown PDE coefficients, stored as the quantity that enters the residual
/// (e.g. the squared diffusivity for the heat equation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseParams {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl InverseParams {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} unknown names but {} values",
                names.len(),
                values.len()
            )));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Draws every unknown of `problem` i.i.d. uniform on `[0, 1)`.
pub fn init_inverse(problem: &Problem, seed: u64) -> InverseParams {
    let mut rng = rng::seeded(seed, Stream::InverseInit);
    let names: Vec<String> = problem.unknowns.iter().map(|u| u.name.to_string()).collect();
    let values = names.iter().map(|_| rng.random::<f64>()).collect();
    InverseParams { names, values }
}

/// The full optimization vector: network parameters followed by the unknowns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableState {
    pub network: NetworkParams,
    pub inverse: InverseParams,
}

impl TrainableState {
    pub fn new(network: NetworkParams, inverse: InverseParams) -> Self {
        Self { network, inverse }
    }

    pub fn flat_len(&self) -> usize {
        self.network.len() + self.inverse.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        out.extend_from_slice(self.network.as_slice());
        out.extend_from_slice(&self.inverse.values);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Shape(format!(
                "state has {} entries, flat vector has {}",
                self.flat_len(),
                flat.len()
            )));
        }
        let m = self.network.len();
        self.network.as_mut_slice().copy_from_slice(&flat[..m]);
        self.inverse.values.copy_from_slice(&flat[m..]);
        Ok(())
    }

    pub fn from_flat(widths: &[usize], names: Vec<String>, flat: &[f64]) -> Result<Self> {
        let m = parameter_count(widths)?;
        if flat.len() != m + names.len() {
            return Err(Error::Shape(format!(
                "expected {} entries, got {}",
                m + names.len(),
                flat.len()
            )));
        }
        let network = NetworkParams::from_flat(widths, flat[..m].to_vec())?;
        let inverse = InverseParams::new(names, flat[m..].to_vec())?;
        Ok(Self { network, inverse })
    }
}
