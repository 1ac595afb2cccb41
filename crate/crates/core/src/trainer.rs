//! DG-PINN and baseline PINN training runs.
//!
//! DG-PINN: Adam on the data loss alone, then the unknowns are drawn, the
//! loss weights are set once from the NTK traces, and L-BFGS minimizes the
//! composite loss over the full state. The baseline runs Adam on the
//! composite loss from the start (weights refreshed every `cadence`
//! iterations) and then L-BFGS with the last weights frozen.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::adaptive_weights::{adaptive_weights, TraceReport};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossData, LossTrace, LossWeights, Objective, Phase};
use crate::mlp::{init_inverse, init_network, InverseParams, TrainableState};
use crate::optimizers::{lbfgs_minimize, AdamConfig, AdamState, LbfgsConfig, StopReason};
use crate::pde_suite::{read_ns_columns, Problem, ProblemId};
use crate::reporting::{evaluate_metrics, ChannelError, Estimate};
use crate::sampling::{build_bundle, Counts, DatasetBundle, GridSpec, Population};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    DgPinn,
    PinnBaseline,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::DgPinn => "dg_pinn",
            Mode::PinnBaseline => "pinn_baseline",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dg_pinn" | "dg-pinn" => Ok(Mode::DgPinn),
            "pinn_baseline" | "pinn-baseline" | "pinn" => Ok(Mode::PinnBaseline),
            _ => Err(Error::Config(format!("unknown mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub sampling: u64,
    pub noise: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { init: seed, sampling: seed, noise: seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub problem: ProblemId,
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub seeds: Seeds,
    pub counts: Counts,
    /// Grid points per axis; `None` uses the problem default.
    pub grid: Option<Vec<usize>>,
    pub m1: usize,
    pub m2: usize,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    /// `None` means noise-free observations.
    pub snr_db: Option<f64>,
    /// Baseline weight refresh interval in Adam iterations.
    pub cadence: usize,
    /// External Navier–Stokes samples instead of the closed-form field.
    pub data_file: Option<PathBuf>,
}

impl TrainConfig {
    /// Full budgets: 20,000 Adam and 10,000 L-BFGS iterations.
    pub fn full(problem: ProblemId) -> Self {
        Self {
            problem,
            mode: Mode::DgPinn,
            hidden: vec![100, 100, 100],
            seeds: Seeds::all(0),
            counts: Counts::default(),
            grid: None,
            m1: 20_000,
            m2: 10_000,
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig::default(),
            snr_db: None,
            cadence: 1000,
            data_file: None,
        }
    }

    /// Reduced budgets (5,000 / 2,000); the beam uses 1,000 residual points.
    pub fn desk(problem: ProblemId) -> Self {
        let mut c = Self::full(problem);
        c.m1 = 5000;
        c.m2 = 2000;
        if problem == ProblemId::Beam {
            c.counts.residual = 1000;
        }
        c
    }

    pub fn problem_spec(&self) -> Problem {
        match (self.problem, &self.data_file) {
            (ProblemId::NavierStokes, Some(_)) => Problem::navier_stokes_external(),
            _ => Problem::new(self.problem),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let p = self.problem_spec();
        let mut w = vec![p.input_dim];
        w.extend(&self.hidden);
        w.push(p.outputs());
        w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.m1 == 0 || self.m2 == 0 {
            return bad("m1 and m2 must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be >= 1");
        }
        if self.counts.residual == 0 || self.counts.data == 0 {
            return bad("nr and nd must be at least 1");
        }
        let p = self.problem_spec();
        if p.conditions.iter().any(|c| c.manifold == crate::pde_suite::Manifold::Initial) && self.counts.initial == 0 {
            return bad("ni must be at least 1");
        }
        if p.conditions.iter().any(|c| c.manifold == crate::pde_suite::Manifold::Boundary) && self.counts.boundary == 0 {
            return bad("nb must be at least 1");
        }
        if self.cadence == 0 {
            return bad("cadence must be at least 1");
        }
        if !(self.adam.lr > 0.0) || !(self.lbfgs.step_scale > 0.0) {
            return bad("learning rate and step scale must be positive");
        }
        if let Some(s) = self.snr_db {
            if s.is_nan() || s == f64::NEG_INFINITY {
                return bad("snr_db must be a number or inf");
            }
        }
        if self.data_file.is_some() && self.problem != ProblemId::NavierStokes {
            return bad("a data file is only supported for navier_stokes_2d");
        }
        if let Some(g) = &self.grid {
            if g.len() != p.input_dim || g.iter().any(|&n| n < 2) {
                return bad("grid needs one count >= 2 per input axis");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub adam_s: f64,
    pub weights_s: f64,
    pub lbfgs_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: ProblemId,
    pub mode: Mode,
    pub converged: bool,
    pub failure: Option<String>,
    pub final_loss: Option<LossBreakdown>,
    pub weights: Option<LossWeights>,
    pub estimates: Vec<Estimate>,
    pub test_errors: Vec<ChannelError>,
    pub trace_reports: Vec<TraceReport>,
    pub phases: Vec<PhaseSummary>,
    pub timings: Timings,
    pub config: TrainConfig,
}

pub struct RunOutput {
    pub report: RunReport,
    pub state: Option<TrainableState>,
    pub trace: LossTrace,
}

/// The sampled training and test sets of a configuration.
pub fn prepare_data(config: &TrainConfig) -> Result<(Problem, DatasetBundle)> {
    let problem = config.problem_spec();
    let mut population = match &config.data_file {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let samples = read_ns_columns(std::io::BufReader::new(file))?;
            Population::from_samples(&problem, &samples)?
        }
        None => {
            let grid = match &config.grid {
                Some(g) => GridSpec::with_counts(&problem, g)?,
                None => GridSpec::for_problem(&problem),
            };
            Population::from_grid(&problem, &grid)?
        }
    };
    if let Some(snr) = config.snr_db {
        population.add_noise(&problem.data_channels, snr, config.seeds.noise)?;
    }
    let bundle = build_bundle(&problem, &population, config.counts, config.seeds.sampling)?;
    Ok((problem, bundle))
}

struct Clock(Instant);

impl Clock {
    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Adam on the data loss, updating only the network part of `state`.
pub fn pretrain(config: &TrainConfig, state: &mut TrainableState, data: &LossData, trace: &mut LossTrace) -> Result<PhaseSummary> {
    let clock = Clock(Instant::now());
    let objective = Objective::data_only(data);
    adam_loop(config, state, data, trace, &clock, |_, _| Ok(objective.weights().clone()), false).map(|(s, _)| s)
}

/// Runs `config.m1` Adam iterations. `weights_at(iter, state)` is consulted
/// at every multiple of the cadence when `refresh` is set, and once up front
/// otherwise.
fn adam_loop(
    config: &TrainConfig,
    state: &mut TrainableState,
    data: &LossData,
    trace: &mut LossTrace,
    clock: &Clock,
    mut weights_at: impl FnMut(usize, &TrainableState) -> Result<LossWeights>,
    refresh: bool,
) -> Result<(PhaseSummary, f64)> {
    let full = refresh;
    let mut weights = weights_at(0, state)?;
    let mut weights_s = 0.0;
    let n = if full { state.flat_len() } else { state.network.len() };
    let mut adam = AdamState::new(config.adam, n);
    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    let mut flat = if full { state.to_flat() } else { state.network.as_slice().to_vec() };
    for it in 0..config.m1 {
        if refresh && it > 0 && it % config.cadence == 0 {
            let t0 = Instant::now();
            weights = weights_at(it, state)?;
            weights_s += t0.elapsed().as_secs_f64();
        }
        let objective = Objective::subset(data, weights.clone())?;
        let (b, g) = objective.value_and_gradient(state).map_err(|e| annotate(e, Phase::Adam, it))?;
        if it == 0 {
            initial = b.total;
        }
        last = b.total;
        trace.push(it, Phase::Adam, &b, clock.secs());
        if it % 500 == 0 {
            info!("adam {it}: loss {:.6e}", b.total);
        }
        let grad = if full { g.to_flat() } else { g.network };
        adam.step(&mut flat, &grad).map_err(|e| annotate(e, Phase::Adam, it))?;
        if full {
            state.set_flat(&flat)?;
        } else {
            state.network.as_mut_slice().copy_from_slice(&flat);
        }
    }
    Ok((
        PhaseSummary {
            phase: Phase::Adam,
            iterations: config.m1,
            evaluations: config.m1,
            initial_loss: initial,
            final_loss: last,
            stop: None,
        },
        weights_s,
    ))
}

fn annotate(e: Error, phase: Phase, iter: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{} iteration {iter}: {m}", phase.as_str())),
        other => other,
    }
}

/// L-BFGS on the composite loss with fixed weights; `state` ends at the best
/// point seen.
pub fn finetune(
    config: &TrainConfig,
    state: &mut TrainableState,
    data: &LossData,
    weights: &LossWeights,
    trace: &mut LossTrace,
) -> Result<PhaseSummary> {
    finetune_with_clock(config, state, data, weights, trace, &Clock(Instant::now()))
}

fn finetune_with_clock(
    config: &TrainConfig,
    state: &mut TrainableState,
    data: &LossData,
    weights: &LossWeights,
    trace: &mut LossTrace,
    clock: &Clock,
) -> Result<PhaseSummary> {
    let objective = Objective::composite(data, weights.clone())?;
    let widths = state.network.widths().to_vec();
    let names = state.inverse.names.clone();
    let mut scratch = state.clone();
    let last = std::cell::RefCell::new(None::<LossBreakdown>);
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        scratch.set_flat(x)?;
        let (b, g) = objective.value_and_gradient(&scratch)?;
        let total = b.total;
        *last.borrow_mut() = Some(b);
        Ok((total, g.to_flat()))
    };
    let start = objective.value(state)?;
    trace.push(0, Phase::Lbfgs, &start, clock.secs());
    let result = lbfgs_minimize(eval, &state.to_flat(), &config.lbfgs, config.m2, |rec, _| {
        if let Some(b) = last.borrow().as_ref() {
            trace.push(rec.iter, Phase::Lbfgs, b, clock.secs());
        }
        if rec.iter % 200 == 0 {
            info!("lbfgs {}: loss {:.6e}", rec.iter, rec.loss);
        }
        if rec.fallback {
            warn!("lbfgs {}: line search failed", rec.iter);
        }
    })?;
    *state = TrainableState::from_flat(&widths, names, &result.x)?;
    Ok(PhaseSummary {
        phase: Phase::Lbfgs,
        iterations: result.iterations,
        evaluations: result.evaluations,
        initial_loss: result.initial_loss,
        final_loss: result.loss,
        stop: Some(result.stop),
    })
}

fn empty_report(config: &TrainConfig) -> RunReport {
    RunReport {
        problem: config.problem,
        mode: config.mode,
        converged: false,
        failure: None,
        final_loss: None,
        weights: None,
        estimates: vec![],
        test_errors: vec![],
        trace_reports: vec![],
        phases: vec![],
        timings: Timings::default(),
        config: config.clone(),
    }
}

/// Trains according to `config.mode`. Numerical failures during training
/// produce a partial report with `converged = false`; configuration errors
/// are returned.
pub fn train(config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let (problem, bundle) = prepare_data(config)?;
    let data = LossData::new(&problem, &bundle)?;
    let mut report = empty_report(config);
    let mut trace = LossTrace::default();
    let clock = Clock(Instant::now());
    let outcome = match config.mode {
        Mode::DgPinn => run_dg(config, &problem, &data, &mut report, &mut trace, &clock),
        Mode::PinnBaseline => run_baseline(config, &problem, &data, &mut report, &mut trace, &clock),
    };
    report.timings.total_s = clock.secs();
    match outcome {
        Ok(state) => {
            let metrics = evaluate_metrics(&problem, &state, &bundle)?;
            report.estimates = metrics.estimates;
            report.test_errors = metrics.test_errors;
            report.converged = report.phases.iter().all(|p| p.stop != Some(StopReason::LineSearchFailures));
            Ok(RunOutput { report, state: Some(state), trace })
        }
        Err(e) if e.is_numerical() => {
            warn!("run aborted: {e}");
            report.failure = Some(e.to_string());
            Ok(RunOutput { report, state: None, trace })
        }
        Err(e) => Err(e),
    }
}

/// DG-PINN; `config.mode` is ignored.
pub fn train_dg_pinn(config: &TrainConfig) -> Result<RunOutput> {
    train(&TrainConfig { mode: Mode::DgPinn, ..config.clone() })
}

/// Baseline PINN; `config.mode` is ignored.
pub fn train_pinn_baseline(config: &TrainConfig) -> Result<RunOutput> {
    train(&TrainConfig { mode: Mode::PinnBaseline, ..config.clone() })
}

fn run_dg(
    config: &TrainConfig,
    problem: &Problem,
    data: &LossData,
    report: &mut RunReport,
    trace: &mut LossTrace,
    clock: &Clock,
) -> Result<TrainableState> {
    let network = init_network(&config.widths(), config.seeds.init)?;
    // the unknowns are drawn only after pre-training; zeros keep the state shape
    let placeholder = InverseParams::new(problem.unknown_names(), vec![0.0; problem.unknowns.len()])?;
    let mut state = TrainableState::new(network, placeholder);
    let objective = Objective::data_only(data);
    let t0 = clock.secs();
    let (summary, _) = adam_loop(config, &mut state, data, trace, clock, |_, _| Ok(objective.weights().clone()), false)?;
    report.phases.push(summary);
    report.timings.adam_s = clock.secs() - t0;

    state.inverse = init_inverse(problem, config.seeds.init);
    let t1 = clock.secs();
    let (weights, traces) = adaptive_weights(&state, data, config.m1)?;
    report.timings.weights_s = clock.secs() - t1;
    report.trace_reports.push(traces);
    report.weights = Some(weights.clone());

    let t2 = clock.secs();
    let summary = finetune_with_clock(config, &mut state, data, &weights, trace, clock)?;
    report.timings.lbfgs_s = clock.secs() - t2;
    report.phases.push(summary);
    report.final_loss = Some(Objective::composite(data, weights)?.value(&state)?);
    Ok(state)
}

fn run_baseline(
    config: &TrainConfig,
    problem: &Problem,
    data: &LossData,
    report: &mut RunReport,
    trace: &mut LossTrace,
    clock: &Clock,
) -> Result<TrainableState> {
    let network = init_network(&config.widths(), config.seeds.init)?;
    let mut state = TrainableState::new(network, init_inverse(problem, config.seeds.init));
    let mut traces = Vec::new();
    let mut weights = None;
    let t0 = clock.secs();
    let (summary, weights_s) = adam_loop(
        config,
        &mut state,
        data,
        trace,
        clock,
        |it, s| {
            let (w, r) = adaptive_weights(s, data, it)?;
            traces.push(r);
            weights = Some(w.clone());
            Ok(w)
        },
        true,
    )?;
    report.phases.push(summary);
    report.timings.weights_s = weights_s;
    report.timings.adam_s = clock.secs() - t0 - weights_s;
    report.trace_reports = traces;
    let weights = weights.expect("weights computed before the first Adam step");
    report.weights = Some(weights.clone());

    let t2 = clock.secs();
    let summary = finetune_with_clock(config, &mut state, data, &weights, trace, clock)?;
    report.timings.lbfgs_s = clock.secs() - t2;
    report.phases.push(summary);
    report.final_loss = Some(Objective::composite(data, weights)?.value(&state)?);
    Ok(state)
}

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Writes the report, checkpoint, loss trace and config echo under `dir`.
pub fn persist(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&output.report)?;
    fs::write(dir.join(REPORT_FILE), json + "\n")?;
    if let Some(state) = &output.state {
        checkpoint::save(&dir.join(CHECKPOINT_FILE), output.report.problem, state)?;
    }
    output.trace.write_csv(BufWriter::new(File::create(dir.join(TRACE_FILE))?))?;
    fs::write(dir.join(CONFIG_FILE), crate::config::to_text(&output.report.config))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive_weights::TRACE_FLOOR;

    fn tiny(problem: ProblemId, mode: Mode) -> TrainConfig {
        let mut c = TrainConfig::desk(problem);
        c.mode = mode;
        c.hidden = vec![8, 8];
        c.grid = Some(if problem == ProblemId::NavierStokes { vec![9, 9, 5] } else { vec![21, 21] });
        c.counts = Counts { residual: 40, initial: 10, boundary: 12, data: 60 };
        c.m1 = 30;
        c.m2 = 10;
        c.cadence = 10;
        c
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::desk(ProblemId::Heat);
        assert!(c.validate().is_ok());
        c.m1 = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::desk(ProblemId::Heat);
        c.data_file = Some("x".into());
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::desk(ProblemId::Beam).counts.residual, 1000);
        assert_eq!(TrainConfig::full(ProblemId::Heat).widths(), vec![2, 100, 100, 100, 1]);
    }

    #[test]
    fn pretrain_leaves_unknowns_untouched() {
        let c = tiny(ProblemId::Heat, Mode::DgPinn);
        let (p, b) = prepare_data(&c).unwrap();
        let data = LossData::new(&p, &b).unwrap();
        let mut s = TrainableState::new(init_network(&c.widths(), 0).unwrap(), init_inverse(&p, 3));
        let before = s.inverse.values[0].to_bits();
        let net_before = s.network.clone();
        let mut trace = LossTrace::default();
        let sum = pretrain(&c, &mut s, &data, &mut trace).unwrap();
        assert_eq!(s.inverse.values[0].to_bits(), before);
        assert_ne!(s.network, net_before);
        assert!(sum.final_loss <= sum.initial_loss);
        assert_eq!(trace.rows.len(), c.m1);
    }

    #[test]
    fn weight_computation_counts() {
        let c = tiny(ProblemId::Wave, Mode::PinnBaseline);
        let out = train(&c).unwrap();
        assert_eq!(out.report.trace_reports.len(), c.m1.div_ceil(c.cadence));
        for r in &out.report.trace_reports {
            assert!(r.identity_error() < 1e-12);
            assert!(r.terms.iter().all(|t| t.trace > TRACE_FLOOR));
        }
        let c = tiny(ProblemId::Wave, Mode::DgPinn);
        let out = train(&c).unwrap();
        assert_eq!(out.report.trace_reports.len(), 1);
        assert_eq!(out.report.phases.len(), 2);
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let c = tiny(ProblemId::Heat, Mode::PinnBaseline);
        let mut a = train(&c).unwrap().report;
        let mut b = train(&c).unwrap().report;
        a.timings = Timings::default();
        b.timings = Timings::default();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn exact_start_finishes_quickly() {
        // zero observations and initial points where the initial profile
        // vanishes: the zero network with the true coefficient is a minimizer
        let c = tiny(ProblemId::Heat, Mode::DgPinn);
        let (p, mut b) = prepare_data(&c).unwrap();
        b.data_values.iter_mut().for_each(|v| *v = 0.0);
        b.initial = vec![0.0, 0.0, 1.0, 0.0];
        let data = LossData::new(&p, &b).unwrap();
        let zero = crate::mlp::NetworkParams::zeros(&c.widths()).unwrap();
        let truth = InverseParams::new(p.unknown_names(), vec![p.unknowns[0].truth]).unwrap();
        let mut s = TrainableState::new(zero, truth);
        let w = LossWeights::uniform(&p.term_ids());
        let mut trace = LossTrace::default();
        let sum = finetune(&c, &mut s, &data, &w, &mut trace).unwrap();
        assert_eq!(sum.iterations, 0);
        assert!(sum.final_loss < 1e-28);
    }

    #[test]
    fn persisted_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(ProblemId::Beam, Mode::DgPinn);
        let out = train(&c).unwrap();
        persist(dir.path(), &out).unwrap();
        let r = read_report(&dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(r, out.report);
        let ck = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(Some(ck.state), out.state);
        let tr = LossTrace::read_csv(std::io::BufReader::new(File::open(dir.path().join(TRACE_FILE)).unwrap())).unwrap();
        assert_eq!(tr.rows.len(), out.trace.rows.len());
        let cfg = crate::config::from_text(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(cfg, c);
    }
}
