//! End-to-end acceptance checks. Every check prints one PASS/FAIL line and
//! then asserts. Training checks run one at a time so that wall-clock
//! measurements are not distorted by concurrent tests.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};

use dgpinn::adaptive_weights::{trace_jjt, TraceReport};
use dgpinn::grad_engine::{eval_with_input_derivatives, fd_gradient, Tape};
use dgpinn::losses::{LossData, LossWeights, Objective};
use dgpinn::mlp::{init_network, InverseParams, TrainableState};
use dgpinn::optimizers::{lbfgs_minimize, AdamConfig, AdamState, LbfgsConfig};
use dgpinn::pde_suite::{Manifold, Problem, ProblemId};
use dgpinn::rng::{seeded, Stream};
use dgpinn::sampling::{build_bundle, Counts, GridSpec, Population};
use dgpinn::trainer::{self, Mode, RunReport, Seeds, TrainConfig};
use rand::Rng;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Written straight to the stderr handle so the line survives output capture.
fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Training runs shared between checks, keyed by their configuration.
fn run(config: &TrainConfig) -> RunReport {
    static CACHE: OnceLock<Mutex<HashMap<String, RunReport>>> = OnceLock::new();
    let key = dgpinn::config::to_text(config);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(r) = cache.lock().unwrap().get(&key) {
        return r.clone();
    }
    let report = trainer::train(config).expect("training run").report;
    cache.lock().unwrap().insert(key, report.clone());
    report
}

fn desk(problem: ProblemId, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk(problem);
    c.seeds = Seeds::all(seed);
    c
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

fn random_point(problem: &Problem, rng: &mut impl Rng) -> Vec<f64> {
    problem.domain.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Central finite difference of order `k` along `axis`. Orders 1 and 2 are
/// Richardson-extrapolated; order 4 uses the fourth-order-accurate
/// seven-point stencil with step 1e-2.
fn fd_partial(f: &dyn Fn(&[f64]) -> f64, x: &[f64], axis: usize, k: u8) -> f64 {
    let at = |d: f64| {
        let mut y = x.to_vec();
        y[axis] += d;
        f(&y)
    };
    let d1 = |h: f64| (at(h) - at(-h)) / (2.0 * h);
    let d2 = |h: f64| (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
    let d3 = |h: f64| (at(2.0 * h) - 2.0 * at(h) + 2.0 * at(-h) - at(-2.0 * h)) / (2.0 * h * h * h);
    match k {
        1 => (4.0 * d1(5e-4) - d1(1e-3)) / 3.0,
        2 => (4.0 * d2(5e-3) - d2(1e-2)) / 3.0,
        3 => (4.0 * d3(5e-3) - d3(1e-2)) / 3.0,
        4 => {
            let h: f64 = 1e-2;
            let c = [-1.0, 12.0, -39.0, 56.0, -39.0, 12.0, -1.0];
            c.iter().enumerate().map(|(i, w)| w * at((i as f64 - 3.0) * h)).sum::<f64>() / (6.0 * h.powi(4))
        }
        _ => unreachable!(),
    }
}

fn small_widths(problem: &Problem) -> Vec<usize> {
    vec![problem.input_dim, 8, 8, problem.outputs()]
}

fn tiny_loss_data(problem: &Problem, seed: u64) -> LossData {
    let counts: Vec<usize> = vec![9; problem.input_dim];
    let grid = GridSpec::with_counts(problem, &counts).unwrap();
    let pop = Population::from_grid(problem, &grid).unwrap();
    let b = build_bundle(problem, &pop, Counts { residual: 5, initial: 3, boundary: 4, data: 6 }, seed).unwrap();
    LossData::new(problem, &b).unwrap()
}

#[test]
fn autodiff_matches_finite_differences() {
    let _g = serial();
    let start = std::time::Instant::now();
    let mut worst_low = 0.0f64;
    let mut worst_fourth = 0.0f64;
    let mut worst_grad = 0.0f64;
    for id in ProblemId::ALL {
        let problem = Problem::new(id);
        let mut spec = problem.residual_spec.clone();
        for m in [Manifold::Initial, Manifold::Boundary] {
            if problem.conditions.iter().any(|c| c.manifold == m) {
                spec = spec.merged(&problem.condition_spec(m)).unwrap();
            }
        }
        let widths = small_widths(&problem);
        let mut rng = seeded(id as u64, Stream::Test);
        for pair in 0..100u64 {
            let net = init_network(&widths, 1000 * id as u64 + pair).unwrap();
            assert!(net.len() <= 200);
            let x = random_point(&problem, &mut rng);
            let bundle = eval_with_input_derivatives(&net, &x, &spec).unwrap();
            for &(c, p) in spec.requests() {
                if p.order == 0 {
                    continue;
                }
                let f = |y: &[f64]| net.forward(y).unwrap()[c];
                let fd = fd_partial(&f, &x, p.axis, p.order);
                let ad = bundle.get(c, p).unwrap();
                if p.order == 4 {
                    worst_fourth = worst_fourth.max(rel(ad, fd, 1e-2));
                } else {
                    worst_low = worst_low.max(rel(ad, fd, 1e-3));
                }
            }

            let data = tiny_loss_data(&problem, pair);
            let gamma: Vec<f64> = problem.unknowns.iter().map(|_| rng.random::<f64>()).collect();
            let state = TrainableState::new(net, InverseParams::new(problem.unknown_names(), gamma).unwrap());
            let weights = LossWeights(problem.term_ids().into_iter().map(|t| (t, 0.5 + rng.random::<f64>())).collect());
            let objective = Objective::composite(&data, weights).unwrap();
            let (_, g) = objective.value_and_gradient(&state).unwrap();
            let g = g.to_flat();
            let names = problem.unknown_names();
            let fd = fd_gradient(
                |theta| {
                    let s = TrainableState::from_flat(&widths, names.clone(), theta)?;
                    Ok(objective.value(&s)?.total)
                },
                &state.to_flat(),
                1e-6,
            )
            .unwrap();
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
            worst_grad = worst_grad.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_low < 1e-6 && worst_fourth < 1e-3 && worst_grad < 1e-6 && secs < 60.0;
    verdict(
        "autodiff vs finite differences",
        pass,
        &format!(
            "orders 1-2 rel {worst_low:.2e} (< 1e-6), order 4 rel {worst_fourth:.2e} (< 1e-3), \
             loss gradient rel {worst_grad:.2e} (< 1e-6), {secs:.1} s (< 60 s)"
        ),
    );
    assert!(pass);
}

#[test]
fn exact_solutions_annihilate_residuals() {
    let _g = serial();
    let mut worst = 0.0f64;
    for id in ProblemId::ALL {
        let problem = Problem::new(id);
        let truth = problem.true_values();
        let mut rng = seeded(10 + id as u64, Stream::Test);
        for _ in 0..1000 {
            let x = random_point(&problem, &mut rng);
            let b = problem.analytic_bundle(&x, &problem.residual_spec).unwrap();
            for r in problem.residual(&b, &truth).unwrap() {
                worst = worst.max(r.abs());
            }
        }
    }
    let pass = worst < 1e-10;
    verdict("exact solutions annihilate residuals", pass, &format!("max |residual| {worst:.2e} (< 1e-10)"));
    assert!(pass);
}

fn inverse_check(name: &str, report: &RunReport, ape_tol: f64, rt_tol: f64) {
    let ape = report.estimates[0].ape;
    let rt = report.test_errors[0].rt;
    let pass = report.failure.is_none() && ape < ape_tol && rt < rt_tol;
    verdict(
        name,
        pass,
        &format!(
            "APE {ape:.4}% (< {ape_tol}%), R_t {rt:.3e} (< {rt_tol:e}), {:.0} s",
            report.timings.total_s
        ),
    );
    assert!(pass);
}

#[test]
fn heat_inverse_desk() {
    let _g = serial();
    inverse_check("heat inverse, desk budget", &run(&desk(ProblemId::Heat, 0)), 1.0, 1e-2);
}

#[test]
fn wave_inverse_desk() {
    let _g = serial();
    inverse_check("wave inverse, desk budget", &run(&desk(ProblemId::Wave, 0)), 0.5, 5e-3);
}

#[test]
fn beam_inverse_desk() {
    let _g = serial();
    let c = desk(ProblemId::Beam, 0);
    assert_eq!(c.counts.residual, 1000);
    inverse_check("beam inverse, desk budget", &run(&c), 1.0, 5e-3);
}

#[test]
fn navier_stokes_taylor_green_desk() {
    let _g = serial();
    let r = run(&desk(ProblemId::NavierStokes, 0));
    let ape = |n: &str| r.estimates.iter().find(|e| e.name == n).map(|e| e.ape).unwrap_or(f64::NAN);
    let rt_p = r.test_errors.iter().find(|e| e.channel == "p").map(|e| e.rt).unwrap_or(f64::NAN);
    let (a1, a2) = (ape("beta1"), ape("beta2"));
    let pass = r.failure.is_none() && a1 < 2.0 && a2 < 10.0 && rt_p < 5e-2 && a2 > a1;
    verdict(
        "Navier-Stokes (Taylor-Green), desk budget",
        pass,
        &format!(
            "APE beta1 {a1:.4}% (< 2%), APE beta2 {a2:.4}% (< 10%, > beta1), centered pressure R_t {rt_p:.3e} (< 5e-2), {:.0} s",
            r.timings.total_s
        ),
    );
    assert!(pass);
}

#[test]
fn heat_noise_robustness_desk() {
    let _g = serial();
    let mut c = desk(ProblemId::Heat, 0);
    c.snr_db = Some(25.0);
    inverse_check("heat inverse at 25 dB SNR, desk budget", &run(&c), 3.0, 2e-2);
}

#[test]
fn data_guided_training_is_cheaper() {
    let _g = serial();
    let mut wall = [0.0; 2];
    let mut rt = [0.0; 2];
    for (k, mode) in [Mode::DgPinn, Mode::PinnBaseline].into_iter().enumerate() {
        for seed in 0..3 {
            let mut c = desk(ProblemId::Heat, seed);
            c.mode = mode;
            let r = run(&c);
            wall[k] += r.timings.total_s / 3.0;
            rt[k] += r.test_errors[0].rt / 3.0;
        }
    }
    let ratio = wall[0] / wall[1];
    let pass = ratio <= 0.5 && rt[0] <= rt[1];
    verdict(
        "DG-PINN wall clock vs baseline, matched budgets",
        pass,
        &format!(
            "mean wall {:.0} s vs {:.0} s, ratio {ratio:.3} (<= 0.5); mean R_t {:.3e} vs {:.3e} (DG <= baseline)",
            wall[0], wall[1], rt[0], rt[1]
        ),
    );
    assert!(pass);
}

/// Brute-force `tr(J Jᵀ)` with a central-difference Jacobian of the
/// per-sample column.
fn fd_trace(state: &TrainableState, data: &LossData, term: dgpinn::losses::TermId) -> f64 {
    let column = |s: &TrainableState| {
        let tape = Tape::new(s);
        let cols = data.record_columns(&tape, &[term]).unwrap();
        cols[0].1.column()
    };
    let widths = state.network.widths().to_vec();
    let names = state.inverse.names.clone();
    let x0 = state.to_flat();
    let h = 1e-6;
    let mut total = 0.0;
    for j in 0..x0.len() {
        let mut x = x0.clone();
        x[j] = x0[j] + h;
        let up = column(&TrainableState::from_flat(&widths, names.clone(), &x).unwrap());
        x[j] = x0[j] - h;
        let down = column(&TrainableState::from_flat(&widths, names.clone(), &x).unwrap());
        total += up.iter().zip(&down).map(|(a, b)| ((a - b) / (2.0 * h)).powi(2)).sum::<f64>();
    }
    total
}

#[test]
fn adaptive_weight_identity_and_traces() {
    let _g = serial();
    let mut worst_identity = 0.0f64;
    let mut worst_trace = 0.0f64;
    let mut reports = 0;
    for id in ProblemId::ALL {
        let problem = Problem::new(id);
        let mut c = TrainConfig::desk(id);
        c.mode = Mode::PinnBaseline;
        c.hidden = vec![10, 10];
        c.grid = Some(vec![11; problem.input_dim]);
        c.counts = Counts { residual: 30, initial: 8, boundary: 10, data: 40 };
        c.m1 = 30;
        c.m2 = 5;
        c.cadence = 10;
        let out = trainer::train(&c).unwrap();
        let all: Vec<&TraceReport> = out.report.trace_reports.iter().collect();
        assert_eq!(all.len(), 3);
        for r in all {
            worst_identity = worst_identity.max(r.identity_error());
            reports += 1;
        }

        let net = init_network(&small_widths(&problem), 50 + id as u64).unwrap();
        let gamma = vec![0.7; problem.unknowns.len()];
        let state = TrainableState::new(net, InverseParams::new(problem.unknown_names(), gamma).unwrap());
        let data = tiny_loss_data(&problem, 3);
        for term in problem.term_ids() {
            let exact = trace_jjt(&state, &data, term).unwrap();
            let brute = fd_trace(&state, &data, term);
            worst_trace = worst_trace.max(rel(exact, brute, 1e-8));
        }
    }
    let pass = worst_identity < 1e-12 && worst_trace < 1e-5;
    verdict(
        "adaptive-weight identity and NTK traces",
        pass,
        &format!(
            "identity error {worst_identity:.2e} over {reports} reports (< 1e-12), trace vs FD Jacobian rel {worst_trace:.2e} (< 1e-5)"
        ),
    );
    assert!(pass);
}

fn strip_timings(v: &mut serde_json::Value) -> serde_json::Value {
    v.as_object_mut().unwrap().remove("timings").unwrap()
}

#[test]
fn repeated_train_commands_agree() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_dgpinn");
    let args = [
        "train", "--problem", "wave", "--desk", "--seed", "3", "--m1", "300", "--m2", "100", "--nr", "300", "--nd", "2000",
    ];
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(exe).args(args).arg("--out").arg(&out).env("RUST_LOG", "warn").status().unwrap();
        assert!(status.success());
        reports.push(std::fs::read_to_string(out.join("report.json")).unwrap());
    }
    let mut a: serde_json::Value = serde_json::from_str(&reports[0]).unwrap();
    let mut b: serde_json::Value = serde_json::from_str(&reports[1]).unwrap();
    let (ta, tb) = (strip_timings(&mut a), strip_timings(&mut b));
    let keys = |t: &serde_json::Value| t.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    let same_body = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();
    let same_shape = keys(&ta) == keys(&tb) && ta.as_object().unwrap().values().all(|v| v.is_f64());
    let ck = |n: &str| std::fs::read(Path::new(dir.path()).join(n).join("checkpoint.bin")).unwrap();
    let same_ckpt = ck("a") == ck("b");
    let pass = same_body && same_shape && same_ckpt;
    verdict(
        "repeated train commands agree",
        pass,
        &format!("report body identical {same_body}, timing fields structurally equal {same_shape}, checkpoints identical {same_ckpt}"),
    );
    assert!(pass);
}

#[test]
fn optimizer_unit_properties() {
    let _g = serial();
    // L-BFGS on 1/2 x^T diag(1, 10) x from (1, 1)
    let quad = |x: &[f64]| -> dgpinn::Result<(f64, Vec<f64>)> {
        Ok((0.5 * (x[0] * x[0] + 10.0 * x[1] * x[1]), vec![x[0], 10.0 * x[1]]))
    };
    let cfg = LbfgsConfig::default();
    let r = lbfgs_minimize(quad, &[1.0, 1.0], &cfg, 10, |_, _| {}).unwrap();
    let g = quad(&r.x).unwrap().1;
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let quad_ok = gnorm < 1e-8 && r.iterations <= 10;

    let rosen = |x: &[f64]| -> dgpinn::Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    };
    let rr = lbfgs_minimize(rosen, &[-1.2, 1.0], &cfg, 200, |_, _| {}).unwrap();
    let rosen_ok = rr.loss < 1e-10 && rr.iterations <= 200;

    // Adam on a 10-d diagonal quadratic with curvatures 1..10
    let d: Vec<f64> = (1..=10).map(|i| i as f64).collect();
    let f = |x: &[f64]| 0.5 * x.iter().zip(&d).map(|(v, k)| k * v * v).sum::<f64>();
    let mut x = vec![1.0; 10];
    let f0 = f(&x);
    let mut adam = AdamState::new(AdamConfig::default(), 10);
    for _ in 0..5000 {
        let g: Vec<f64> = x.iter().zip(&d).map(|(v, k)| k * v).collect();
        adam.step(&mut x, &g).unwrap();
    }
    let reduction = f0 / f(&x);
    let adam_ok = reduction >= 1e6;

    let pass = quad_ok && rosen_ok && adam_ok;
    verdict(
        "optimizer unit properties",
        pass,
        &format!(
            "quadratic |g| {gnorm:.2e} in {} iterations (< 1e-8, <= 10); Rosenbrock loss {:.2e} in {} iterations (< 1e-10, <= 200); \
             Adam reduction {reduction:.2e} (>= 1e6)",
            r.iterations, rr.loss, rr.iterations
        ),
    );
    assert!(pass);
}
