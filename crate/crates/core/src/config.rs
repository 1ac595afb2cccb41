//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [run]
//! problem = heat
//! m1 = 5000
//! [adam]
//! lr = 0.001
//! ```
//!
//! Keys are addressed as `section.key`. Every key is optional; unknown
//! sections and keys are rejected. [`to_text`] writes every key, and its
//! output parses back to the same configuration.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::pde_suite::ProblemId;
use crate::sampling::Counts;
use crate::trainer::TrainConfig;

pub const KEYS: &[&str] = &[
    "run.problem",
    "run.mode",
    "run.m1",
    "run.m2",
    "run.snr_db",
    "run.cadence",
    "run.data_file",
    "network.hidden",
    "seeds.init",
    "seeds.sampling",
    "seeds.noise",
    "sampling.nr",
    "sampling.ni",
    "sampling.nb",
    "sampling.nd",
    "sampling.grid",
    "adam.lr",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "lbfgs.step_scale",
    "lbfgs.history",
    "lbfgs.c1",
    "lbfgs.c2",
    "lbfgs.max_line_search",
    "lbfgs.grad_tol",
    "lbfgs.rel_change_tol",
    "lbfgs.curvature_floor",
    "lbfgs.max_consecutive_failures",
];

/// `(section.key, value)` pairs in file order.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            section = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?
                .trim()
                .to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key '{key}'", n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `section.key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    let k = k.trim().to_string();
    if !KEYS.contains(&k.as_str()) {
        return Err(Error::Config(format!("unknown key '{k}'")));
    }
    Ok((k, v.trim().to_string()))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

/// Sets one key. `run.problem` is handled by [`from_entries`] since it
/// selects the defaults.
pub fn apply(c: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "run.problem" => {
            let p: ProblemId = v.parse()?;
            if p != c.problem {
                return Err(Error::Config(format!("problem is {} here, cannot switch to {p}", c.problem)));
            }
        }
        "run.mode" => c.mode = v.parse()?,
        "run.m1" => c.m1 = num(key, v)?,
        "run.m2" => c.m2 = num(key, v)?,
        "run.snr_db" => c.snr_db = if v == "none" || v.is_empty() { None } else { Some(num(key, v)?) },
        "run.cadence" => c.cadence = num(key, v)?,
        "run.data_file" => c.data_file = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
        "network.hidden" => c.hidden = list(key, v)?,
        "seeds.init" => c.seeds.init = num(key, v)?,
        "seeds.sampling" => c.seeds.sampling = num(key, v)?,
        "seeds.noise" => c.seeds.noise = num(key, v)?,
        "sampling.nr" => c.counts.residual = num(key, v)?,
        "sampling.ni" => c.counts.initial = num(key, v)?,
        "sampling.nb" => c.counts.boundary = num(key, v)?,
        "sampling.nd" => c.counts.data = num(key, v)?,
        "sampling.grid" => c.grid = if v.is_empty() || v == "default" { None } else { Some(list(key, v)?) },
        "adam.lr" => c.adam.lr = num(key, v)?,
        "adam.beta1" => c.adam.beta1 = num(key, v)?,
        "adam.beta2" => c.adam.beta2 = num(key, v)?,
        "adam.eps" => c.adam.eps = num(key, v)?,
        "lbfgs.step_scale" => c.lbfgs.step_scale = num(key, v)?,
        "lbfgs.history" => c.lbfgs.history = num(key, v)?,
        "lbfgs.c1" => c.lbfgs.c1 = num(key, v)?,
        "lbfgs.c2" => c.lbfgs.c2 = num(key, v)?,
        "lbfgs.max_line_search" => c.lbfgs.max_line_search = num(key, v)?,
        "lbfgs.grad_tol" => c.lbfgs.grad_tol = num(key, v)?,
        "lbfgs.rel_change_tol" => c.lbfgs.rel_change_tol = num(key, v)?,
        "lbfgs.curvature_floor" => c.lbfgs.curvature_floor = num(key, v)?,
        "lbfgs.max_consecutive_failures" => c.lbfgs.max_consecutive_failures = num(key, v)?,
        _ => return Err(Error::Config(format!("unknown key '{key}'"))),
    }
    Ok(())
}

/// The problem named by the last `run.problem` entry, if any.
pub fn problem_of(entries: &[(String, String)]) -> Result<Option<ProblemId>> {
    entries.iter().rev().find(|(k, _)| k == "run.problem").map(|(_, v)| v.parse()).transpose()
}

/// Full-budget defaults for the named problem (heat when unnamed), then the
/// entries in order.
pub fn from_entries(entries: &[(String, String)]) -> Result<TrainConfig> {
    let mut c = TrainConfig::full(problem_of(entries)?.unwrap_or(ProblemId::Heat));
    for (k, v) in entries {
        apply(&mut c, k, v)?;
    }
    Ok(c)
}

pub fn from_text(text: &str) -> Result<TrainConfig> {
    from_entries(&parse_entries(text)?)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every key, grouped by section.
pub fn to_text(c: &TrainConfig) -> String {
    let Counts { residual, initial, boundary, data } = c.counts;
    let l = &c.lbfgs;
    format!(
        "[run]\nproblem = {}\nmode = {}\nm1 = {}\nm2 = {}\nsnr_db = {}\ncadence = {}\ndata_file = {}\n\n\
         [network]\nhidden = {}\n\n\
         [seeds]\ninit = {}\nsampling = {}\nnoise = {}\n\n\
         [sampling]\nnr = {residual}\nni = {initial}\nnb = {boundary}\nnd = {data}\ngrid = {}\n\n\
         [adam]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\n\n\
         [lbfgs]\nstep_scale = {}\nhistory = {}\nc1 = {}\nc2 = {}\nmax_line_search = {}\ngrad_tol = {}\n\
         rel_change_tol = {}\ncurvature_floor = {}\nmax_consecutive_failures = {}\n",
        c.problem,
        c.mode.as_str(),
        c.m1,
        c.m2,
        c.snr_db.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
        c.cadence,
        c.data_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        join(&c.hidden),
        c.seeds.init,
        c.seeds.sampling,
        c.seeds.noise,
        c.grid.as_ref().map(|g| join(g)).unwrap_or_else(|| "default".into()),
        c.adam.lr,
        c.adam.beta1,
        c.adam.beta2,
        c.adam.eps,
        l.step_scale,
        l.history,
        l.c1,
        l.c2,
        l.max_line_search,
        l.grad_tol,
        l.rel_change_tol,
        l.curvature_floor,
        l.max_consecutive_failures,
    )
}
