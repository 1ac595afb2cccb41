use std::path::Path;
use std::process::{Command, Output};

fn dgpinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgpinn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--m1", "20", "--m2", "5", "--nr", "30", "--ni", "8", "--nb", "10", "--nd", "40",
    "--set", "network.hidden=6,6", "--set", "sampling.grid=17,17", "--set", "run.cadence=10",
];

fn train_tiny(problem: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--problem", problem, "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    dgpinn(&args)
}

#[test]
fn bad_arguments_exit_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny("heat", dir.path(), &["--m1", "0"])), 1);
    assert_eq!(code(&train_tiny("heat", dir.path(), &["--set", "run.bogus=3"])), 1);
    assert_eq!(code(&dgpinn(&["train", "--problem", "plasma"])), 1);
    assert_eq!(code(&dgpinn(&["no-such-command"])), 1);
    assert_eq!(code(&dgpinn(&["--help"])), 0);
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("wave");
    let o = train_tiny("wave", &run, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "checkpoint.bin", "loss_trace.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trace = std::fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    assert!(trace.starts_with("iter,phase,term_id,value,weighted_total,wallclock_s\n"));

    let ck = run.join("checkpoint.bin");
    let o = dgpinn(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o).lines().find(|l| l.starts_with("max deviation")).unwrap().to_string();
    assert!(line.ends_with(": 0e0"), "{line}");

    let o = dgpinn(&["eval", "--checkpoint", ck.to_str().unwrap(), "--problem", "heat"]);
    assert_eq!(code(&o), 1);

    let bytes = std::fs::read(&ck).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert_eq!(code(&dgpinn(&["eval", "--checkpoint", cut.to_str().unwrap(), "--problem", "wave"])), 1);

    let again = dir.path().join("again");
    let o = dgpinn(&["train", "--rerun", run.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("rerun matches"));
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    std::fs::write(&cfg, "[run]\nproblem = beam\nmode = pinn_baseline\n[seeds]\ninit = 4\n").unwrap();
    let run = dir.path().join("beam");
    let o = train_tiny("beam", &run, &["--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("mode = pinn_baseline"));
    assert!(echo.contains("init = 9"));
    assert!(echo.contains("hidden = 6,6"));
}

#[test]
fn compare_and_sweep_write_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let mut args = vec!["compare", "--problem", "heat", "--trials", "2", "--jobs", "2", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = dgpinn(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let methods: Vec<&str> = summary["rows"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["dg_pinn", "pinn_baseline"]);

    let out = dir.path().join("noise");
    let mut args = vec!["noise-study", "--problem", "heat", "--values", "30,40", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = dgpinn(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep_snr_db.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "snr_db,rt_u,rt_obs_u,ape_beta_sq,wallclock_s,converged");
    assert_eq!(lines.len(), 3);
}

#[test]
fn gen_data_output_trains_navier_stokes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ns.txt");
    let o = dgpinn(&["gen-data", "--grid", "7,7,4", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("ns");
    let o = dgpinn(&[
        "train", "--problem", "navier_stokes_2d", "--data-file", data.to_str().unwrap(),
        "--m1", "10", "--m2", "3", "--nr", "20", "--nd", "30", "--set", "network.hidden=6",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").exists());
}
