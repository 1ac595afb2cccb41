//! Adam and L-BFGS on flat parameter vectors.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self { config, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    /// One bias-corrected update of `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state has {} entries, got theta {} and gradient {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} is {} at Adam step {}", grad[i], self.step + 1)));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64]) -> Result<()> {
    state.step(theta, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub history: usize,
    /// Multiplies the initial trial step of every line search.
    pub step_scale: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    pub grad_tol: f64,
    pub rel_change_tol: f64,
    pub curvature_floor: f64,
    pub max_consecutive_failures: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 50,
            step_scale: 0.1,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
            grad_tol: 1e-9,
            rel_change_tol: 1e-15,
            curvature_floor: 1e-16,
            max_consecutive_failures: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    GradientTolerance,
    LossChangeTolerance,
    LineSearchFailures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsRecord {
    pub iter: usize,
    pub loss: f64,
    pub step: f64,
    pub evaluations: usize,
    /// The line search failed and a steepest-descent step was taken.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    /// Best point seen.
    pub x: Vec<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub trace: Vec<LbfgsRecord>,
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Stored `sᵀy` of each history pair, exposed for tests.
pub struct History(VecDeque<Pair>);

impl History {
    pub fn curvatures(&self) -> Vec<f64> {
        self.0.iter().map(|p| 1.0 / p.rho).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Two-loop recursion: returns `-H g`.
fn direction(history: &VecDeque<Pair>, g: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alpha = vec![0.0; history.len()];
    for (k, p) in history.iter().enumerate().rev() {
        alpha[k] = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= alpha[k] * yi);
    }
    if let Some(last) = history.back() {
        let h0 = 1.0 / (last.rho * dot(&last.y, &last.y));
        q.iter_mut().for_each(|v| *v *= h0);
    }
    for (k, p) in history.iter().enumerate() {
        let beta = p.rho * dot(&p.y, &q);
        q.iter_mut().zip(&p.s).for_each(|(qi, si)| *qi += (alpha[k] - beta) * si);
    }
    q
}

/// Minimizer of the cubic interpolating two points with slopes, clamped to
/// `bounds` (defaulting to the interval between the points).
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: Option<(f64, f64)>) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    (lo + hi) / 2.0
}

struct Trial {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct LineSearch {
    best: Trial,
    evaluations: usize,
    success: bool,
}

/// Strong Wolfe search along `d` from `x`, bracketing then zooming with
/// cubic interpolation.
fn strong_wolfe<F>(f_eval: &mut F, x: &[f64], d: &[f64], f0: f64, gtd0: f64, t_init: f64, cfg: &LbfgsConfig) -> Result<LineSearch>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let d_norm = max_abs(d);
    let mut eval = |t: f64| -> Result<Trial> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        match f_eval(&xt) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let gtd = dot(&g, d);
                Ok(Trial { t, f, g, gtd })
            }
            Ok(_) => Ok(Trial { t, f: f64::INFINITY, g: vec![0.0; x.len()], gtd: f64::INFINITY }),
            Err(e) if e.is_numerical() => {
                Ok(Trial { t, f: f64::INFINITY, g: vec![0.0; x.len()], gtd: f64::INFINITY })
            }
            Err(e) => Err(e),
        }
    };
    let armijo = |tr: &Trial| tr.f <= f0 + cfg.c1 * tr.t * gtd0;
    let curvature = |tr: &Trial| tr.gtd.abs() <= -cfg.c2 * gtd0;

    let mut prev = Trial { t: 0.0, f: f0, g: vec![], gtd: gtd0 };
    let mut cur = eval(t_init)?;
    let mut iters = 1;
    // bracket phase
    let mut br = loop {
        if !armijo(&cur) || (iters > 1 && cur.f >= prev.f) || cur.gtd >= 0.0 {
            break [prev, cur];
        }
        if curvature(&cur) {
            return Ok(LineSearch { best: cur, evaluations: iters, success: true });
        }
        if iters >= cfg.max_line_search {
            // still extrapolating; cur satisfies Armijo
            return Ok(LineSearch { best: cur, evaluations: iters, success: false });
        }
        let lo = cur.t + 0.01 * (cur.t - prev.t);
        let hi = cur.t * 10.0;
        let t = cubic_interpolate(prev.t, prev.f, prev.gtd, cur.t, cur.f, cur.gtd, Some((lo, hi)));
        prev = std::mem::replace(&mut cur, eval(t)?);
        iters += 1;
    };
    // zoom phase
    let mut insufficient = false;
    let (mut low, mut high) = if br[0].f <= br[1].f { (0, 1) } else { (1, 0) };
    while iters < cfg.max_line_search {
        if (br[1].t - br[0].t).abs() * d_norm < 1e-12 * (1.0 + max_abs(x)) {
            break;
        }
        let (a, b) = (&br[0], &br[1]);
        let mut t = if a.gtd.is_finite() && b.gtd.is_finite() && b.f.is_finite() {
            cubic_interpolate(a.t, a.f, a.gtd, b.t, b.f, b.gtd, None)
        } else {
            (a.t + b.t) / 2.0
        };
        let tmax = a.t.max(b.t);
        let tmin = a.t.min(b.t);
        let eps = 0.1 * (tmax - tmin);
        if (tmax - t).min(t - tmin) < eps {
            if insufficient || t >= tmax || t <= tmin {
                t = if (t - tmax).abs() < (t - tmin).abs() { tmax - eps } else { tmin + eps };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let trial = eval(t)?;
        iters += 1;
        if !armijo(&trial) || trial.f >= br[low].f {
            br[high] = trial;
        } else {
            if curvature(&trial) {
                return Ok(LineSearch { best: trial, evaluations: iters, success: true });
            }
            if trial.gtd * (br[high].t - br[low].t) >= 0.0 {
                br.swap(low, high);
            }
            br[low] = trial;
        }
        (low, high) = if br[0].f <= br[1].f { (0, 1) } else { (1, 0) };
    }
    let [a, b] = br;
    let best = if low == 0 { a } else { b };
    Ok(LineSearch { best, evaluations: iters, success: false })
}

/// Minimizes `f` (returning loss and gradient) from `x0` for at most
/// `max_iterations` outer iterations. `on_iter` sees each accepted iterate.
pub fn lbfgs_minimize<F, C>(
    mut f: F,
    x0: &[f64],
    cfg: &LbfgsConfig,
    max_iterations: usize,
    mut on_iter: C,
) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&LbfgsRecord, &[f64]),
{
    lbfgs_with_history(&mut f, x0, cfg, max_iterations, &mut on_iter).map(|(r, _)| r)
}

/// As [`lbfgs_minimize`], also returning the final curvature history.
pub fn lbfgs_with_history<F, C>(
    f: &mut F,
    x0: &[f64],
    cfg: &LbfgsConfig,
    max_iterations: usize,
    on_iter: &mut C,
) -> Result<(LbfgsResult, History)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&LbfgsRecord, &[f64]),
{
    if cfg.history == 0 || !(cfg.step_scale > 0.0) {
        return Err(Error::Config("L-BFGS needs history >= 1 and a positive step scale".into()));
    }
    let (mut loss, mut g) = f(x0)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("initial loss {loss}")));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("initial gradient entry {i}")));
    }
    let mut x = x0.to_vec();
    let mut evaluations = 1;
    let mut best = (loss, x.clone());
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.history);
    let mut trace = Vec::new();
    let mut failures = 0;
    let mut iterations = 0;
    let initial_loss = loss;
    let mut stop = StopReason::MaxIterations;

    if max_abs(&g) < cfg.grad_tol {
        stop = StopReason::GradientTolerance;
    } else {
        while iterations < max_iterations {
            iterations += 1;
            let mut d = direction(&history, &g);
            let mut gtd = dot(&g, &d);
            if !(gtd < 0.0) {
                history.clear();
                d = g.iter().map(|v| -v).collect();
                gtd = -dot(&g, &g);
            }
            let t_init = if history.is_empty() {
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                (1.0f64).min(1.0 / l1) * cfg.step_scale
            } else {
                cfg.step_scale
            };
            let ls = strong_wolfe(f, &x, &d, loss, gtd, t_init, cfg)?;
            evaluations += ls.evaluations;
            let accept = ls.success || (ls.best.t > 0.0 && ls.best.f < loss && ls.best.f.is_finite());
            let (new_x, new_loss, new_g, step, fallback) = if accept {
                let t = ls.best.t;
                let nx: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                (nx, ls.best.f, ls.best.g, t, !ls.success)
            } else {
                let gn = dot(&g, &g).sqrt();
                let len = cfg.step_scale * 1e-3;
                let nx: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - len * gi / gn).collect();
                evaluations += 1;
                match f(&nx) {
                    Ok((fl, gr)) if fl.is_finite() && gr.iter().all(|v| v.is_finite()) => (nx, fl, gr, len, true),
                    Ok(_) => (x.clone(), loss, g.clone(), 0.0, true),
                    Err(e) if e.is_numerical() => (x.clone(), loss, g.clone(), 0.0, true),
                    Err(e) => return Err(e),
                }
            };
            if ls.success {
                failures = 0;
            } else {
                failures += 1;
                history.clear();
            }
            let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = new_g.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > cfg.curvature_floor {
                if history.len() == cfg.history {
                    history.pop_front();
                }
                history.push_back(Pair { s, y, rho: 1.0 / sy });
            }
            let prev_loss = loss;
            x = new_x;
            loss = new_loss;
            g = new_g;
            if loss < best.0 {
                best = (loss, x.clone());
            }
            let rec = LbfgsRecord { iter: iterations, loss, step, evaluations, fallback };
            on_iter(&rec, &x);
            trace.push(rec);
            if failures >= cfg.max_consecutive_failures {
                stop = StopReason::LineSearchFailures;
                break;
            }
            if max_abs(&g) < cfg.grad_tol {
                stop = StopReason::GradientTolerance;
                break;
            }
            if step > 0.0 && (prev_loss - loss).abs() <= cfg.rel_change_tol * prev_loss.abs() {
                stop = StopReason::LossChangeTolerance;
                break;
            }
        }
    }
    let converged = stop != StopReason::LineSearchFailures;
    Ok((
        LbfgsResult { x: best.1, loss: best.0, initial_loss, iterations, evaluations, converged, stop, trace },
        History(history),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(diag: &'static [f64]) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let f = 0.5 * x.iter().zip(diag).map(|(x, d)| d * x * x).sum::<f64>();
            Ok((f, x.iter().zip(diag).map(|(x, d)| d * x).collect()))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut s = AdamState::new(AdamConfig::default(), 3);
        let mut th = vec![0.1, -0.2, 0.3];
        s.step(&mut th, &[0.0; 3]).unwrap();
        assert_eq!(th, vec![0.1, -0.2, 0.3]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut s = AdamState::new(AdamConfig::default(), 1);
        let mut th = vec![1.0];
        s.step(&mut th, &[1.0]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((th[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-16);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut s = AdamState::new(AdamConfig::default(), 2);
        let mut th = vec![0.0; 2];
        assert!(matches!(s.step(&mut th, &[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(s.step(&mut th, &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_steps_are_bounded() {
        let mut s = AdamState::new(AdamConfig::default(), 4);
        let mut th = vec![1.0, -2.0, 0.5, 3.0];
        for k in 0..500 {
            let g: Vec<f64> = th.iter().enumerate().map(|(i, t)| (i as f64 + 1.0) * t + (k as f64).sin()).collect();
            let before = th.clone();
            s.step(&mut th, &g).unwrap();
            assert!(th.iter().zip(&before).all(|(a, b)| (a - b).abs() <= 1.1e-3));
        }
    }

    #[test]
    fn cubic_interpolation_on_a_cubic() {
        // f = (t - 1)^3 - 3(t - 1): minimum of the cubic at t = 2
        let f = |t: f64| (t - 1.0).powi(3) - 3.0 * (t - 1.0);
        let g = |t: f64| 3.0 * (t - 1.0).powi(2) - 3.0;
        let t = cubic_interpolate(0.5, f(0.5), g(0.5), 3.0, f(3.0), g(3.0), None);
        assert!((t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lbfgs_stationary_start() {
        let r = lbfgs_minimize(quad(&[1.0, 10.0]), &[0.0, 0.0], &LbfgsConfig::default(), 100, |_, _| {}).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.x, vec![0.0, 0.0]);
        assert!(r.converged);
    }

    #[test]
    fn lbfgs_ill_conditioned_quadratic() {
        let mut last_grad = f64::MAX;
        let mut f = quad(&[1.0, 10.0]);
        let r = lbfgs_minimize(&mut f, &[1.0, 1.0], &LbfgsConfig::default(), 10, |_, x| {
            last_grad = (x[0] * x[0] + 100.0 * x[1] * x[1]).sqrt();
        })
        .unwrap();
        assert!(r.iterations <= 10);
        let g = (r.x[0].powi(2) + 100.0 * r.x[1].powi(2)).sqrt();
        assert!(g < 1e-8, "gradient norm {g} after {} iterations", r.iterations);
        assert!(last_grad < 1e-8);
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let r = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &LbfgsConfig::default(), 200, |_, _| {}).unwrap();
        assert!(r.loss < 1e-10, "loss {} after {} iterations", r.loss, r.iterations);
        assert!(r.loss <= r.initial_loss);
    }

    #[test]
    fn stored_pairs_have_positive_curvature() {
        let cfg = LbfgsConfig { history: 3, ..Default::default() };
        let mut f = rosenbrock;
        let mut checks = 0;
        let (_, h) = lbfgs_with_history(&mut f, &[-1.2, 1.0], &cfg, 30, &mut |_, _| checks += 1).unwrap();
        assert!(checks > 0);
        assert!(h.curvatures().iter().all(|&c| c > 0.0));
        assert!(h.curvatures().len() <= 3);
    }

    #[test]
    fn single_pair_history_is_monotone_on_quadratic() {
        let cfg = LbfgsConfig { history: 1, ..Default::default() };
        let mut losses = vec![];
        let mut f = quad(&[1.0, 4.0, 25.0]);
        lbfgs_minimize(&mut f, &[1.0, -1.0, 0.5], &cfg, 30, |rec, _| losses.push(rec.loss)).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lbfgs_is_deterministic() {
        let a = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &LbfgsConfig::default(), 50, |_, _| {}).unwrap();
        let b = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &LbfgsConfig::default(), 50, |_, _| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lbfgs_never_returns_worse_than_start() {
        // a function whose line searches keep failing: gradient points the wrong way
        let bad = |x: &[f64]| Ok((x[0] * x[0], vec![-2.0 * x[0] - 1.0]));
        let r = lbfgs_minimize(bad, &[1.0], &LbfgsConfig::default(), 50, |_, _| {}).unwrap();
        assert!(r.loss <= r.initial_loss);
        assert!(!r.converged);
        assert_eq!(r.stop, StopReason::LineSearchFailures);
    }

    #[test]
    fn lbfgs_rejects_non_finite_start() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(lbfgs_minimize(f, &[0.0], &LbfgsConfig::default(), 5, |_, _| {}).is_err());
    }
}
