//! Metrics, parameter sweeps and method comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_engine::predict;
use crate::mlp::TrainableState;
use crate::pde_suite::{Problem, ProblemId};
use crate::sampling::DatasetBundle;
use crate::trainer::{self, Mode, RunOutput, RunReport, Seeds, TrainConfig};

/// `‖truth − prediction‖₂ / ‖truth‖₂`.
pub fn relative_l2(truth: &[f64], prediction: &[f64]) -> Result<f64> {
    if truth.len() != prediction.len() || truth.is_empty() {
        return Err(Error::Shape(format!("relative L2 of lengths {} and {}", truth.len(), prediction.len())));
    }
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("relative L2 against an all-zero truth".into()));
    }
    let num: f64 = truth.iter().zip(prediction).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((num / den).sqrt())
}

/// Absolute percentage error.
pub fn ape(estimate: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::UndefinedMetric("percentage error against a zero truth".into()));
    }
    Ok(100.0 * (estimate - truth).abs() / truth.abs())
}

pub fn mean_center(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return vec![];
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| v - mean).collect()
}

/// Centers `values` separately within each group of equal `keys`.
pub fn mean_center_by(values: &[f64], keys: &[f64]) -> Vec<f64> {
    let mut groups: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (v, k) in values.iter().zip(keys) {
        let e = groups.entry(k.to_bits()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    values
        .iter()
        .zip(keys)
        .map(|(v, k)| {
            let (s, n) = groups[&k.to_bits()];
            v - s / n as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub truth: f64,
    pub ape: f64,
}

/// Test-set relative L2 error of one output channel, against the clean field
/// and against the observed (possibly noisy) field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelError {
    pub channel: String,
    pub rt: f64,
    pub rt_observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub estimates: Vec<Estimate>,
    pub test_errors: Vec<ChannelError>,
}

/// Coefficient errors and per-channel test errors of a trained state.
/// Navier–Stokes pressure is compared after centering each time snapshot.
pub fn evaluate_metrics(problem: &Problem, state: &TrainableState, bundle: &DatasetBundle) -> Result<Metrics> {
    let estimates = problem
        .unknowns
        .iter()
        .map(|u| {
            let estimate = state
                .inverse
                .get(u.name)
                .ok_or_else(|| Error::Shape(format!("state has no unknown named {}", u.name)))?;
            Ok(Estimate { name: u.name.to_string(), estimate, truth: u.truth, ape: ape(estimate, u.truth)? })
        })
        .collect::<Result<Vec<_>>>()?;

    let pred = predict(&state.network, &bundle.test)?;
    let m = bundle.channels;
    let col = |v: &[f64], c: usize| v.iter().skip(c).step_by(m).copied().collect::<Vec<_>>();
    let time = problem.time_axis();
    let times: Vec<f64> = bundle.test.iter().skip(time).step_by(bundle.input_dim).copied().collect();
    let mut test_errors = Vec::with_capacity(m);
    for (c, name) in problem.channels.iter().enumerate() {
        let centered = problem.id == ProblemId::NavierStokes && *name == "p";
        let prep = |v: Vec<f64>| if centered { mean_center_by(&v, &times) } else { v };
        let p = prep(col(&pred, c));
        let rt = relative_l2(&prep(col(&bundle.test_clean, c)), &p)?;
        let rt_observed = relative_l2(&prep(col(&bundle.test_observed, c)), &p)?;
        test_errors.push(ChannelError { channel: name.to_string(), rt, rt_observed });
    }
    Ok(Metrics { estimates, test_errors })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    M1,
    Nd,
    SnrDb,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::M1 => "m1",
            SweepAxis::Nd => "nd",
            SweepAxis::SnrDb => "snr_db",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "m1" => Ok(SweepAxis::M1),
            "nd" => Ok(SweepAxis::Nd),
            "snr_db" => Ok(SweepAxis::SnrDb),
            _ => Err(Error::Parse(format!("unknown sweep axis '{s}'"))),
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(&self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value < 1e15 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {value}", self.as_str())))
            }
        };
        let mut c = base.clone();
        match self {
            SweepAxis::M1 => c.m1 = count()?,
            SweepAxis::Nd => c.counts.data = count()?,
            SweepAxis::SnrDb => c.snr_db = Some(value),
        }
        Ok(c)
    }
}

/// One sweep value; metric fields are `None` when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub rt: Vec<Option<f64>>,
    pub rt_observed: Vec<Option<f64>>,
    pub ape: Vec<Option<f64>>,
    pub wallclock_s: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub channels: Vec<String>,
    pub unknowns: Vec<String>,
    pub points: Vec<SweepPoint>,
}

impl SweepPoint {
    fn from_report(value: f64, problem: &Problem, report: Option<&RunReport>) -> Self {
        let nc = problem.outputs();
        let nu = problem.unknowns.len();
        match report.filter(|r| r.failure.is_none()) {
            Some(r) => SweepPoint {
                value,
                rt: r.test_errors.iter().map(|e| Some(e.rt)).collect(),
                rt_observed: r.test_errors.iter().map(|e| Some(e.rt_observed)).collect(),
                ape: r.estimates.iter().map(|e| Some(e.ape)).collect(),
                wallclock_s: Some(r.timings.total_s),
                converged: r.converged,
            },
            None => SweepPoint {
                value,
                rt: vec![None; nc],
                rt_observed: vec![None; nc],
                ape: vec![None; nu],
                wallclock_s: None,
                converged: false,
            },
        }
    }
}

impl SweepResult {
    pub fn header(&self) -> String {
        let mut cols = vec![self.axis.as_str().to_string()];
        cols.extend(self.channels.iter().map(|c| format!("rt_{c}")));
        cols.extend(self.channels.iter().map(|c| format!("rt_obs_{c}")));
        cols.extend(self.unknowns.iter().map(|u| format!("ape_{u}")));
        cols.push("wallclock_s".into());
        cols.push("converged".into());
        cols.join(",")
    }

    /// Floats use the shortest representation that parses back exactly;
    /// failed runs leave their metric fields empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header())?;
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.points {
            let mut line = p.value.to_string();
            for v in p.rt.iter().chain(&p.rt_observed).chain(&p.ape).chain(std::iter::once(&p.wallclock_s)) {
                let _ = write!(line, ",{}", opt(v));
            }
            let _ = write!(line, ",{}", p.converged);
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty sweep file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 2] != "wallclock_s" || cols[cols.len() - 1] != "converged" {
            return Err(Error::Parse(format!("unexpected sweep header '{header}'")));
        }
        let axis = SweepAxis::parse(cols[0])?;
        let channels: Vec<String> = cols.iter().filter_map(|c| c.strip_prefix("rt_")).filter(|c| !c.starts_with("obs_")).map(String::from).collect();
        let unknowns: Vec<String> = cols.iter().filter_map(|c| c.strip_prefix("ape_")).map(String::from).collect();
        let nc = channels.len();
        let nu = unknowns.len();
        let mut result = SweepResult { axis, channels, unknowns, points: vec![] };
        if result.header() != header {
            return Err(Error::Parse(format!("unexpected sweep header '{header}'")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}'")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(Error::Parse(format!("row {} has {} fields, expected {}", i + 1, f.len(), cols.len())));
            }
            let o = f[1..f.len() - 1].iter().map(|s| opt(s)).collect::<Result<Vec<_>>>()?;
            let converged = f[f.len() - 1]
                .parse::<bool>()
                .map_err(|_| Error::Parse(format!("bad flag '{}'", f[f.len() - 1])))?;
            result.points.push(SweepPoint {
                value: num(f[0])?,
                rt: o[..nc].to_vec(),
                rt_observed: o[nc..2 * nc].to_vec(),
                ape: o[2 * nc..2 * nc + nu].to_vec(),
                wallclock_s: o[2 * nc + nu],
                converged,
            });
        }
        Ok(result)
    }
}

/// Trains every configuration, `jobs` at a time. Each run is independent
/// and deterministic, so results do not depend on `jobs`.
pub fn run_all(configs: &[TrainConfig], jobs: usize) -> Vec<Result<RunOutput>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunOutput>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let out = trainer::train(&configs[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("every run filled")).collect()
}

fn persist_run(out: Option<&Path>, name: &str, run: &Result<RunOutput>) -> Result<()> {
    if let (Some(dir), Ok(run)) = (out, run) {
        trainer::persist(&dir.join(name), run)?;
    }
    Ok(())
}

/// DG-PINN runs across `values` of one axis with everything else fixed.
/// Per-run failures are recorded and the sweep continues; run artifacts go
/// under `out/<axis>_<value>` when `out` is given.
pub fn run_sweep(axis: SweepAxis, values: &[f64], base: &TrainConfig, jobs: usize, out: Option<&Path>) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    if values.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("sweep values must be distinct".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let c = axis.apply(&TrainConfig { mode: Mode::DgPinn, ..base.clone() }, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = base.problem_spec();
    let runs = run_all(&configs, jobs);
    let mut points = Vec::with_capacity(values.len());
    for (&v, run) in values.iter().zip(&runs) {
        persist_run(out, &format!("{}_{v}", axis.as_str()), run)?;
        if let Err(e) = run {
            log::warn!("{} = {v}: {e}", axis.as_str());
        }
        points.push(SweepPoint::from_report(v, &problem, run.as_ref().ok().map(|r| &r.report)));
    }
    Ok(SweepResult {
        axis,
        channels: problem.channels.iter().map(|c| c.to_string()).collect(),
        unknowns: problem.unknown_names(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub rt: BTreeMap<String, f64>,
    pub ape: BTreeMap<String, f64>,
    pub wallclock_s: Option<f64>,
    pub excluded: bool,
}

/// Averages over the retained trials of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Mode,
    pub trials: usize,
    pub excluded: usize,
    pub rt: BTreeMap<String, f64>,
    pub ape: BTreeMap<String, f64>,
    pub wallclock_s: f64,
    pub per_trial: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub problem: ProblemId,
    pub rows: Vec<MethodSummary>,
}

/// A trial is excluded when it failed or its final composite loss exceeds
/// this multiple of the median over its method's trials.
pub const OUTLIER_FACTOR: f64 = 1e3;

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn summarize(method: Mode, seeds: &[u64], runs: &[Result<RunOutput>]) -> MethodSummary {
    let mut per_trial: Vec<TrialSummary> = seeds
        .iter()
        .zip(runs)
        .map(|(&seed, run)| {
            let report = run.as_ref().ok().map(|r| &r.report).filter(|r| r.failure.is_none());
            TrialSummary {
                seed,
                final_loss: report.and_then(|r| r.final_loss.as_ref()).map(|l| l.total),
                rt: report.map(|r| r.test_errors.iter().map(|e| (e.channel.clone(), e.rt)).collect()).unwrap_or_default(),
                ape: report.map(|r| r.estimates.iter().map(|e| (e.name.clone(), e.ape)).collect()).unwrap_or_default(),
                wallclock_s: report.map(|r| r.timings.total_s),
                excluded: false,
            }
        })
        .collect();
    let mut losses: Vec<f64> = per_trial.iter().filter_map(|t| t.final_loss).filter(|l| l.is_finite()).collect();
    let med = median(&mut losses);
    for t in &mut per_trial {
        t.excluded = match (t.final_loss, med) {
            (Some(l), Some(m)) => !(l <= OUTLIER_FACTOR * m),
            _ => true,
        };
    }
    let kept: Vec<&TrialSummary> = per_trial.iter().filter(|t| !t.excluded).collect();
    let mean_of = |get: &dyn Fn(&TrialSummary) -> &BTreeMap<String, f64>| {
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        for t in &kept {
            for (k, v) in get(t) {
                *acc.entry(k.clone()).or_default() += v / kept.len() as f64;
            }
        }
        acc
    };
    let rt = mean_of(&|t| &t.rt);
    let ape = mean_of(&|t| &t.ape);
    let wallclock_s = kept.iter().filter_map(|t| t.wallclock_s).sum::<f64>() / kept.len().max(1) as f64;
    MethodSummary {
        method,
        trials: per_trial.len(),
        excluded: per_trial.len() - kept.len(),
        rt,
        ape,
        wallclock_s,
        per_trial,
    }
}

/// DG-PINN against the baseline PINN over `trials` seeds, starting at the
/// base init seed (seeds `s, s+1, ...` for initialization, sampling and
/// noise alike).
pub fn compare(base: &TrainConfig, trials: usize, jobs: usize, out: Option<&Path>) -> Result<Comparison> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    base.validate()?;
    let seeds: Vec<u64> = (0..trials as u64).map(|i| base.seeds.init + i).collect();
    let methods = [Mode::DgPinn, Mode::PinnBaseline];
    let configs: Vec<TrainConfig> = methods
        .iter()
        .flat_map(|&mode| seeds.iter().map(move |&s| TrainConfig { mode, seeds: Seeds::all(s), ..base.clone() }))
        .collect();
    let runs = run_all(&configs, jobs);
    let mut rows = Vec::new();
    for (k, &mode) in methods.iter().enumerate() {
        let chunk = &runs[k * trials..(k + 1) * trials];
        for (&s, run) in seeds.iter().zip(chunk) {
            persist_run(out, &format!("{}_seed{s}", mode.as_str()), run)?;
        }
        rows.push(summarize(mode, &seeds, chunk));
    }
    Ok(Comparison { problem: base.problem, rows })
}
