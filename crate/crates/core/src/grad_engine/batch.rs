//! Batched forward/reverse passes of the network in Taylor mode.
//!
//! Activations are stored row-major with one row per (coefficient block,
//! point): row `block * points + p`. Each layer is then a single GEMM over
//! all blocks, with the bias entering only block 0.

use super::gemm::gemm;
use super::taylor;
use super::{DerivSpec, Partial};
use crate::error::{Error, Result};
use crate::mlp::NetworkParams;

/// Which Taylor coefficient blocks a pass carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnLayout {
    /// (input axis, highest order, first block index)
    directions: Vec<(usize, usize, usize)>,
    blocks: usize,
}

impl ColumnLayout {
    pub fn for_spec(spec: &DerivSpec) -> Self {
        let mut orders = vec![0usize; spec.input_dim()];
        for (_, p) in spec.requests() {
            if p.order > 0 {
                orders[p.axis] = orders[p.axis].max(p.order as usize);
            }
        }
        let mut directions = Vec::new();
        let mut next = 1;
        for (axis, &order) in orders.iter().enumerate() {
            if order > 0 {
                directions.push((axis, order, next));
                next += order;
            }
        }
        Self { directions, blocks: next }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_of(&self, p: Partial) -> Option<usize> {
        if p.order == 0 {
            return Some(0);
        }
        self.directions
            .iter()
            .find(|(axis, order, _)| *axis == p.axis && p.order as usize <= *order)
            .map(|(_, _, base)| base + p.order as usize - 1)
    }
}

struct HiddenRecord {
    pre: Vec<f64>,
    post: Vec<f64>,
    q: Vec<f64>,
}

/// One recorded batched evaluation; keeps what the reverse sweep needs.
pub struct BatchRecording {
    points: usize,
    layout: ColumnLayout,
    input: Vec<f64>,
    hidden: Vec<HiddenRecord>,
    output: Vec<f64>,
}

impl BatchRecording {
    /// `coords` is row-major `points x input_dim`.
    pub fn forward(params: &NetworkParams, coords: &[f64], spec: &DerivSpec) -> Result<Self> {
        let d = params.input_dim();
        if spec.input_dim() != d {
            return Err(Error::Shape(format!(
                "derivative spec is for {} inputs, network has {d}",
                spec.input_dim()
            )));
        }
        if spec.outputs() != params.output_dim() {
            return Err(Error::Shape(format!(
                "derivative spec is for {} outputs, network has {}",
                spec.outputs(),
                params.output_dim()
            )));
        }
        if !coords.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "coordinate buffer of length {} is not a multiple of {d}",
                coords.len()
            )));
        }
        let points = coords.len() / d;
        let layout = ColumnLayout::for_spec(spec);
        let blocks = layout.blocks();
        let rows = blocks * points;

        // Block 0 holds the coordinates; the first coefficient along each
        // direction is the unit vector of its axis; higher ones vanish.
        let mut input = vec![0.0; rows * d];
        input[..points * d].copy_from_slice(coords);
        for &(axis, _, base) in &layout.directions {
            for p in 0..points {
                input[(base * points + p) * d + axis] = 1.0;
            }
        }

        let n_layers = params.layers().len();
        let mut hidden: Vec<HiddenRecord> = Vec::with_capacity(n_layers - 1);
        for h in 0..n_layers {
            let shape = params.layers()[h];
            let prev: &[f64] = match hidden.last() {
                Some(r) => &r.post,
                None => &input,
            };
            let mut pre = vec![0.0; rows * shape.fan_out];
            gemm(
                rows,
                shape.fan_in,
                shape.fan_out,
                1.0,
                prev,
                false,
                params.weights(h),
                true,
                0.0,
                &mut pre,
            );
            let bias = params.bias(h);
            for row in pre[..points * shape.fan_out].chunks_exact_mut(shape.fan_out) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
            if let Some(i) = pre.iter().position(|v| !v.is_finite()) {
                let (block, point) = (i / shape.fan_out / points, (i / shape.fan_out) % points);
                let node = if h + 1 == n_layers { "output layer".to_string() } else { format!("hidden layer {h} pre-activation") };
                return Err(Error::NonFinite(format!(
                    "{node}, coefficient block {block}, point {point}, unit {}",
                    i % shape.fan_out
                )));
            }
            if h + 1 == n_layers {
                return Ok(Self { points, layout, input, hidden, output: pre });
            }
            let block = points * shape.fan_out;
            let mut post = vec![0.0; rows * shape.fan_out];
            let mut q = vec![0.0; rows * shape.fan_out];
            taylor::value_forward(&pre[..block], &mut post[..block], &mut q[..block], block);
            for &(_, order, base) in &layout.directions {
                taylor::direction_forward(&pre, &mut post, &mut q, block, base, order);
            }
            hidden.push(HiddenRecord { pre, post, q });
        }
        unreachable!("loop returns at the output layer")
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn layout(&self) -> &ColumnLayout {
        &self.layout
    }

    pub fn output_dim(&self) -> usize {
        self.output.len() / (self.layout.blocks * self.points.max(1))
    }

    /// Values of one bundle entry for every point, scaled to true derivatives.
    pub fn entry(&self, channel: usize, partial: Partial) -> Result<Vec<f64>> {
        let m = self.output_dim();
        let block = self
            .layout
            .block_of(partial)
            .ok_or_else(|| Error::MissingEntry(format!("{partial} was not recorded")))?;
        if channel >= m {
            return Err(Error::MissingEntry(format!("channel {channel} of {m}")));
        }
        let scale = partial.factorial();
        let start = block * self.points;
        Ok((start..start + self.points).map(|r| scale * self.output[r * m + channel]).collect())
    }

    /// Runs the reverse sweep. `seed` has the shape of the output
    /// coefficients (`blocks * points x outputs`), holding adjoints of the
    /// normalized Taylor coefficients. Accumulates into `grad` (flat, length M).
    pub fn backward(&self, params: &NetworkParams, seed: &[f64], grad: &mut [f64]) {
        self.sweep(params, seed, Sink::Gradient(grad));
    }

    /// Squared norm of each point's parameter gradient, where `seed` holds
    /// per-point adjoints (no coupling between points). Uses the identity
    /// `|sum_c a_c f_c^T|_F^2 = sum_{c,c'} (a_c . a_c')(f_c . f_c')` per layer.
    pub fn per_point_sq_norms(&self, params: &NetworkParams, seed: &[f64]) -> Vec<f64> {
        let mut norms = vec![0.0; self.points];
        self.sweep(params, seed, Sink::PerPoint(&mut norms));
        norms
    }

    fn sweep(&self, params: &NetworkParams, seed: &[f64], mut sink: Sink<'_>) {
        let rows = self.layout.blocks * self.points;
        let n_layers = params.layers().len();
        let mut adj = seed.to_vec();
        for h in (0..n_layers).rev() {
            let shape = params.layers()[h];
            let prev: &[f64] = if h == 0 { &self.input } else { &self.hidden[h - 1].post };
            // adj is dL/d(pre-activation) of layer h here
            match &mut sink {
                Sink::Gradient(grad) => {
                    let wg = &mut grad[shape.weight_offset..shape.bias_offset];
                    gemm(shape.fan_out, rows, shape.fan_in, 1.0, &adj, true, prev, false, 1.0, wg);
                    let bg = &mut grad[shape.bias_offset..shape.bias_offset + shape.fan_out];
                    column_sums_into(&adj[..self.points * shape.fan_out], shape.fan_out, bg);
                }
                Sink::PerPoint(norms) => {
                    self.accumulate_sq_norms(&adj, shape.fan_out, prev, shape.fan_in, norms);
                }
            }
            if h == 0 {
                break;
            }
            let mut prev_adj = vec![0.0; rows * shape.fan_in];
            gemm(rows, shape.fan_out, shape.fan_in, 1.0, &adj, false, params.weights(h), false, 0.0, &mut prev_adj);
            adj = self.tanh_reverse(h - 1, prev_adj, shape.fan_in);
        }
    }

    fn tanh_reverse(&self, hidden: usize, mut ybar: Vec<f64>, width: usize) -> Vec<f64> {
        let rec = &self.hidden[hidden];
        let block = self.points * width;
        let mut abar = vec![0.0; ybar.len()];
        let mut qbar0 = vec![0.0; block];
        for &(_, order, base) in &self.layout.directions {
            taylor::direction_reverse(&rec.pre, &rec.post, &rec.q, &mut ybar, &mut abar, &mut qbar0, block, base, order);
        }
        taylor::value_reverse(&rec.post[..block], &rec.q[..block], &ybar[..block], &qbar0, &mut abar[..block], block);
        abar
    }

    fn accumulate_sq_norms(&self, adj: &[f64], n_out: usize, prev: &[f64], n_in: usize, norms: &mut [f64]) {
        let blocks = self.layout.blocks;
        let pts = self.points;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (p, norm) in norms.iter_mut().enumerate() {
            let arow = |c: usize| &adj[(c * pts + p) * n_out..(c * pts + p + 1) * n_out];
            let frow = |c: usize| &prev[(c * pts + p) * n_in..(c * pts + p + 1) * n_in];
            let mut s = 0.0;
            for c in 0..blocks {
                s += dot(arow(c), arow(c)) * dot(frow(c), frow(c));
                for c2 in c + 1..blocks {
                    s += 2.0 * dot(arow(c), arow(c2)) * dot(frow(c), frow(c2));
                }
            }
            // bias enters block 0 only
            s += dot(arow(0), arow(0));
            *norm += s;
        }
    }
}

enum Sink<'a> {
    Gradient(&'a mut [f64]),
    PerPoint(&'a mut [f64]),
}

/// Column sums of a row-major matrix, reduced in fixed chunks of rows so the
/// result does not depend on how callers split the work.
fn column_sums_into(matrix: &[f64], width: usize, out: &mut [f64]) {
    const CHUNK_ROWS: usize = 1024;
    let mut partial = vec![0.0; width];
    for chunk in matrix.chunks(CHUNK_ROWS * width) {
        partial.iter_mut().for_each(|v| *v = 0.0);
        for row in chunk.chunks_exact(width) {
            partial.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        out.iter_mut().zip(&partial).for_each(|(o, s)| *o += s);
    }
}
