//! Observation grid, training-set sampling and additive Gaussian noise.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde_suite::{DataSource, FieldSample, Manifold, Problem, ProblemId};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Tensor-product grid; the first axis varies slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("grid needs at least one axis".into()));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.count < 2 {
                return Err(Error::Config(format!("grid axis {i} needs at least 2 points")));
            }
            if !(a.hi > a.lo) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::Config(format!("grid axis {i} has empty range [{}, {}]", a.lo, a.hi)));
            }
        }
        Ok(Self { axes })
    }

    /// 201 x 201 for the 1-D problems, 41 x 41 x 21 for Navier–Stokes.
    pub fn for_problem(problem: &Problem) -> Self {
        let counts: &[usize] = match problem.id {
            ProblemId::NavierStokes => &[41, 41, 21],
            _ => &[201, 201],
        };
        Self::with_counts(problem, counts).expect("static grid")
    }

    pub fn with_counts(problem: &Problem, counts: &[usize]) -> Result<Self> {
        if counts.len() != problem.input_dim {
            return Err(Error::Config(format!(
                "{} needs {} grid counts, got {}",
                problem.id,
                problem.input_dim,
                counts.len()
            )));
        }
        Self::new(
            problem
                .domain
                .iter()
                .zip(counts)
                .map(|(&(lo, hi), &count)| Axis { lo, hi, count })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        (a.hi - a.lo) / (a.count - 1) as f64
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        let a = &self.axes[axis];
        if i + 1 == a.count {
            a.hi
        } else {
            a.lo + i as f64 * self.spacing(axis)
        }
    }

    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for (slot, a) in out.iter_mut().zip(&self.axes).rev() {
            *slot = index % a.count;
            index /= a.count;
        }
        out
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        self.multi_index(index).iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }

    /// Node indices lying on `manifold`; the time axis is the last one.
    pub fn indices_on(&self, manifold: Manifold) -> Vec<usize> {
        let last = self.dim() - 1;
        let n0 = self.axes[0].count;
        (0..self.len())
            .filter(|&i| {
                let mi = self.multi_index(i);
                match manifold {
                    Manifold::Initial => mi[last] == 0,
                    Manifold::Boundary => mi[0] == 0 || mi[0] == n0 - 1,
                }
            })
            .collect()
    }
}

/// Every candidate node with its clean and observed field values.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub input_dim: usize,
    pub channels: usize,
    /// Row-major `len x input_dim`.
    pub coords: Vec<f64>,
    /// Row-major `len x channels`.
    pub clean: Vec<f64>,
    pub observed: Vec<f64>,
    pub initial: Vec<usize>,
    pub boundary: Vec<usize>,
}

impl Population {
    /// Evaluates the closed-form solution on every grid node.
    pub fn from_grid(problem: &Problem, grid: &GridSpec) -> Result<Self> {
        if grid.dim() != problem.input_dim {
            return Err(Error::Config(format!("grid is {}-D, {} is {}-D", grid.dim(), problem.id, problem.input_dim)));
        }
        let mut coords = Vec::with_capacity(grid.len() * grid.dim());
        let mut clean = Vec::with_capacity(grid.len() * problem.outputs());
        for i in 0..grid.len() {
            let p = grid.point(i);
            clean.extend(problem.analytic_solution(&p)?);
            coords.extend(p);
        }
        let has = |m| problem.conditions.iter().any(|c| c.manifold == m);
        Ok(Self {
            input_dim: grid.dim(),
            channels: problem.outputs(),
            coords,
            observed: clean.clone(),
            clean,
            initial: if has(Manifold::Initial) { grid.indices_on(Manifold::Initial) } else { vec![] },
            boundary: if has(Manifold::Boundary) { grid.indices_on(Manifold::Boundary) } else { vec![] },
        })
    }

    /// Scattered samples, e.g. an ingested dataset. No IC/BC manifolds.
    /// Only analytic problems check the samples against their domain.
    pub fn from_samples(problem: &Problem, samples: &[FieldSample]) -> Result<Self> {
        let mut coords = Vec::with_capacity(samples.len() * problem.input_dim);
        let mut clean = Vec::with_capacity(samples.len() * problem.outputs());
        for (i, s) in samples.iter().enumerate() {
            if s.coords.len() != problem.input_dim || s.values.len() != problem.outputs() {
                return Err(Error::Shape(format!("sample {i} has the wrong number of columns")));
            }
            if s.coords.iter().chain(&s.values).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {i}")));
            }
            let inside = s.coords.iter().zip(&problem.domain).all(|(c, (lo, hi))| c >= lo && c <= hi);
            if problem.source == DataSource::Analytic && !inside {
                return Err(Error::Config(format!("sample {i} at {:?} lies outside the domain", s.coords)));
            }
            coords.extend_from_slice(&s.coords);
            clean.extend_from_slice(&s.values);
        }
        Ok(Self {
            input_dim: problem.input_dim,
            channels: problem.outputs(),
            coords,
            observed: clean.clone(),
            clean,
            initial: vec![],
            boundary: vec![],
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channel(&self, values: &[f64], c: usize) -> Vec<f64> {
        values.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Corrupts each listed channel of the observed field independently,
    /// with the signal power taken over that whole channel.
    pub fn add_noise(&mut self, channels: &[usize], snr_db: f64, seed: u64) -> Result<()> {
        if snr_db == f64::INFINITY {
            return Ok(());
        }
        let mut rng = rng::seeded(seed, Stream::Noise);
        for &c in channels {
            let clean = self.channel(&self.clean, c);
            let noisy = noise_with(&mut rng, &clean, snr_db)?;
            for (i, v) in noisy.into_iter().enumerate() {
                self.observed[i * self.channels + c] = v;
            }
        }
        Ok(())
    }
}

/// Numbers of residual, initial, boundary and data points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub residual: usize,
    pub initial: usize,
    pub boundary: usize,
    pub data: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self { residual: 2000, initial: 100, boundary: 200, data: 10_000 }
    }
}

/// Population indices of each sampled set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetIndices {
    pub residual: Vec<usize>,
    pub initial: Vec<usize>,
    pub boundary: Vec<usize>,
    pub data: Vec<usize>,
    pub test: Vec<usize>,
}

/// Training sets plus the held-out test set. Coordinates are row-major
/// `points x input_dim`; field values are row-major `points x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub input_dim: usize,
    pub channels: usize,
    pub residual: Vec<f64>,
    pub initial: Vec<f64>,
    pub boundary: Vec<f64>,
    pub data: Vec<f64>,
    pub data_values: Vec<f64>,
    pub test: Vec<f64>,
    pub test_clean: Vec<f64>,
    pub test_observed: Vec<f64>,
    pub indices: SetIndices,
}

impl DatasetBundle {
    pub fn n_residual(&self) -> usize {
        self.residual.len() / self.input_dim
    }
    pub fn n_initial(&self) -> usize {
        self.initial.len() / self.input_dim
    }
    pub fn n_boundary(&self) -> usize {
        self.boundary.len() / self.input_dim
    }
    pub fn n_data(&self) -> usize {
        self.data.len() / self.input_dim
    }
    pub fn n_test(&self) -> usize {
        self.test.len() / self.input_dim
    }
}

fn draw(rng: &mut impl rand::Rng, population: &[usize], k: usize, what: &str) -> Result<Vec<usize>> {
    if k > population.len() {
        return Err(Error::Config(format!(
            "requested {k} {what} points but only {} candidates exist",
            population.len()
        )));
    }
    let mut picked: Vec<usize> = index::sample(rng, population.len(), k).into_iter().map(|i| population[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

fn gather(values: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| values[i * width..(i + 1) * width].iter().copied()).collect()
}

/// Draws the four training sets without replacement; the test set is every
/// node not drawn into the data set. Problems without initial or boundary
/// conditions get empty IC/BC sets regardless of the requested counts.
pub fn build_bundle(problem: &Problem, population: &Population, counts: Counts, seed: u64) -> Result<DatasetBundle> {
    let n = population.len();
    if counts.residual == 0 || counts.data == 0 {
        return Err(Error::Config("residual and data counts must be positive".into()));
    }
    let has = |m| problem.conditions.iter().any(|c| c.manifold == m);
    let mut rng = rng::seeded(seed, Stream::Sampling);
    let all: Vec<usize> = (0..n).collect();
    let residual = draw(&mut rng, &all, counts.residual, "residual")?;
    let initial = if has(Manifold::Initial) {
        if counts.initial == 0 {
            return Err(Error::Config(format!("{} needs initial points", problem.id)));
        }
        draw(&mut rng, &population.initial, counts.initial, "initial")?
    } else {
        vec![]
    };
    let boundary = if has(Manifold::Boundary) {
        if counts.boundary == 0 {
            return Err(Error::Config(format!("{} needs boundary points", problem.id)));
        }
        draw(&mut rng, &population.boundary, counts.boundary, "boundary")?
    } else {
        vec![]
    };
    let data = draw(&mut rng, &all, counts.data, "data")?;
    let mut in_data = vec![false; n];
    data.iter().for_each(|&i| in_data[i] = true);
    let test: Vec<usize> = (0..n).filter(|&i| !in_data[i]).collect();

    let d = population.input_dim;
    let c = population.channels;
    Ok(DatasetBundle {
        input_dim: d,
        channels: c,
        residual: gather(&population.coords, d, &residual),
        initial: gather(&population.coords, d, &initial),
        boundary: gather(&population.coords, d, &boundary),
        data: gather(&population.coords, d, &data),
        data_values: gather(&population.observed, c, &data),
        test: gather(&population.coords, d, &test),
        test_clean: gather(&population.clean, c, &test),
        test_observed: gather(&population.observed, c, &test),
        indices: SetIndices { residual, initial, boundary, data, test },
    })
}

fn noise_with(rng: &mut impl rand::Rng, values: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Config("cannot add noise to an empty signal".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(values.to_vec());
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    let power = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    if power == 0.0 {
        return Err(Error::UndefinedMetric("SNR of an all-zero signal".into()));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    Ok(values
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect())
}

/// Adds i.i.d. Gaussian noise at the given SNR (dB), with the signal power
/// taken as the mean square of `values`. `+inf` leaves the values unchanged.
pub fn add_noise(values: &[f64], snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng::seeded(seed, Stream::Noise);
    noise_with(&mut rng, values, snr_db)
}
