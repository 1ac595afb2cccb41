//! `dgpinn` command-line frontend.
//!
//! Exit status: 0 on success, 1 on configuration or input errors, 2 on
//! numerical failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgpinn::checkpoint;
use dgpinn::config;
use dgpinn::pde_suite::{write_columns, FieldSample, ProblemId};
use dgpinn::reporting::{self, evaluate_metrics, Metrics, SweepAxis};
use dgpinn::sampling::{GridSpec, Population};
use dgpinn::trainer::{self, Mode, RunReport, TrainConfig, CONFIG_FILE, REPORT_FILE};
use dgpinn::Error;

#[derive(Parser)]
#[command(name = "dgpinn", version, about = "Data-guided PINNs for inverse PDE problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its report, checkpoint and loss trace.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Replay the config echo in this run directory and diff the reports.
        #[arg(long, value_name = "DIR")]
        rerun: Option<PathBuf>,
    },
    /// DG-PINN against the baseline PINN over several seeds.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// DG-PINN over a range of pre-training lengths.
    SweepM1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = default_m1_values())]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// DG-PINN over a range of data-set sizes.
    SweepNd {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![500.0, 1000.0, 2000.0, 4000.0, 6000.0, 8000.0, 10000.0])]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// DG-PINN over observation noise levels (dB).
    NoiseStudy {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![25.0, 30.0, 35.0, 40.0])]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the closed-form field of a problem as whitespace-separated columns.
    GenData {
        #[arg(long, default_value = "navier_stokes_2d")]
        problem: ProblemId,
        /// Points per axis, comma separated.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Expected problem; a checkpoint of another problem is rejected.
        #[arg(long)]
        problem: Option<ProblemId>,
        /// Run configuration; defaults to the config echo next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Points per axis of the evaluation grid, comma separated.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
        /// Also write the metrics as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_m1_values() -> Vec<f64> {
    vec![2000.0, 4000.0, 6000.0, 8000.0, 10000.0, 12000.0, 14000.0, 16000.0, 18000.0, 20000.0, 25000.0, 30000.0, 35000.0, 40000.0, 50000.0]
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    problem: Option<ProblemId>,
    /// Start from the reduced budgets instead of the full ones.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied after every other source.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    m1: Option<usize>,
    #[arg(long)]
    m2: Option<usize>,
    #[arg(long)]
    nd: Option<usize>,
    #[arg(long)]
    nr: Option<usize>,
    #[arg(long)]
    ni: Option<usize>,
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long = "snr-db")]
    snr_db: Option<f64>,
    /// Seed for initialization, sampling and noise.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long = "data-file")]
    data_file: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

impl RunArgs {
    /// Preset, then the config file, then flags, then `--set` overrides.
    fn resolve(&self) -> dgpinn::Result<TrainConfig> {
        let entries = match &self.config {
            Some(p) => config::parse_entries(&read_text(p)?)?,
            None => vec![],
        };
        let file_problem = config::problem_of(&entries)?;
        let problem = match (self.problem, file_problem) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("--problem {a} conflicts with {b} in the config file")))
            }
            (a, b) => a.or(b).unwrap_or(ProblemId::Heat),
        };
        let mut c = if self.desk { TrainConfig::desk(problem) } else { TrainConfig::full(problem) };
        for (k, v) in &entries {
            config::apply(&mut c, k, v)?;
        }
        if let Some(v) = self.m1 {
            c.m1 = v;
        }
        if let Some(v) = self.m2 {
            c.m2 = v;
        }
        if let Some(v) = self.nd {
            c.counts.data = v;
        }
        if let Some(v) = self.nr {
            c.counts.residual = v;
        }
        if let Some(v) = self.ni {
            c.counts.initial = v;
        }
        if let Some(v) = self.nb {
            c.counts.boundary = v;
        }
        if let Some(v) = self.snr_db {
            c.snr_db = Some(v);
        }
        if let Some(s) = self.seed {
            c.seeds = trainer::Seeds::all(s);
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(p) = &self.data_file {
            c.data_file = Some(p.clone());
        }
        for s in &self.set {
            let (k, v) = config::parse_override(s)?;
            config::apply(&mut c, &k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_text(p: &Path) -> dgpinn::Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> dgpinn::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn print_report(r: &RunReport) {
    for e in &r.estimates {
        println!("{:<10} estimate {:.6e}  truth {:.6e}  APE {:.4}%", e.name, e.estimate, e.truth, e.ape);
    }
    for e in &r.test_errors {
        println!("R_t({})  {:.4e}  (vs observed {:.4e})", e.channel, e.rt, e.rt_observed);
    }
    println!("wall clock {:.2} s, converged {}", r.timings.total_s, r.converged);
}

/// The report with wall-clock values cleared, for structural comparison.
fn without_timings(r: &RunReport) -> dgpinn::Result<String> {
    let mut r = r.clone();
    r.timings = Default::default();
    Ok(serde_json::to_string_pretty(&r)?)
}

fn train(run: &RunArgs, rerun: Option<&Path>) -> dgpinn::Result<u8> {
    let (cfg, out) = match rerun {
        Some(dir) => (config::from_text(&read_text(&dir.join(CONFIG_FILE))?)?, run.out.clone()),
        None => (run.resolve()?, run.out.clone()),
    };
    let output = trainer::train(&cfg)?;
    trainer::persist(&out, &output)?;
    print_report(&output.report);
    if let Some(dir) = rerun {
        let before = trainer::read_report(&dir.join(REPORT_FILE))?;
        let (a, b) = (without_timings(&before)?, without_timings(&output.report)?);
        if a != b {
            eprintln!("rerun differs from {}", dir.join(REPORT_FILE).display());
            for (x, y) in a.lines().zip(b.lines()).filter(|(x, y)| x != y).take(20) {
                eprintln!("- {x}\n+ {y}");
            }
            return Ok(2);
        }
        println!("rerun matches {}", dir.join(REPORT_FILE).display());
    }
    Ok(match &output.report.failure {
        Some(f) => {
            eprintln!("training failed: {f}");
            2
        }
        None => 0,
    })
}

fn sweep(run: &RunArgs, axis: SweepAxis, values: &[f64], jobs: usize) -> dgpinn::Result<u8> {
    let base = run.resolve()?;
    let result = reporting::run_sweep(axis, values, &base, jobs, Some(&run.out))?;
    fs::create_dir_all(&run.out)?;
    let path = run.out.join(format!("sweep_{}.csv", axis.as_str()));
    result.write_csv(BufWriter::new(File::create(&path)?))?;
    write_json(&run.out.join(format!("sweep_{}.json", axis.as_str())), &result)?;
    print!("{}", fs::read_to_string(&path)?);
    Ok(if result.points.iter().any(|p| p.wallclock_s.is_none()) { 2 } else { 0 })
}

fn compare(run: &RunArgs, trials: usize, jobs: usize) -> dgpinn::Result<u8> {
    let base = run.resolve()?;
    let cmp = reporting::compare(&base, trials, jobs, Some(&run.out))?;
    write_json(&run.out.join("summary.json"), &cmp)?;
    for row in &cmp.rows {
        let rt: Vec<String> = row.rt.iter().map(|(k, v)| format!("R_t({k}) {v:.4e}")).collect();
        let ape: Vec<String> = row.ape.iter().map(|(k, v)| format!("APE({k}) {v:.4}%")).collect();
        println!(
            "{:<14} {}  {}  wall {:.2} s  kept {}/{}",
            row.method.as_str(),
            rt.join("  "),
            ape.join("  "),
            row.wallclock_s,
            row.trials - row.excluded,
            row.trials
        );
    }
    Ok(0)
}

fn gen_data(problem: ProblemId, grid: Option<&[usize]>, out: &Path) -> dgpinn::Result<u8> {
    let p = dgpinn::pde_suite::Problem::new(problem);
    let g = match grid {
        Some(g) => GridSpec::with_counts(&p, g)?,
        None => GridSpec::for_problem(&p),
    };
    let pop = Population::from_grid(&p, &g)?;
    let (d, m) = (pop.input_dim, pop.channels);
    let samples: Vec<FieldSample> = (0..pop.len())
        .map(|i| FieldSample {
            coords: pop.coords[i * d..(i + 1) * d].to_vec(),
            values: pop.clean[i * m..(i + 1) * m].to_vec(),
        })
        .collect();
    let names: Vec<&str> = p.axis_names.iter().chain(&p.channels).copied().collect();
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out)?);
    write_columns(&mut w, &names, &samples)?;
    w.flush()?;
    println!("wrote {} rows to {}", samples.len(), out.display());
    Ok(0)
}

fn eval(
    ckpt: &Path,
    problem: Option<ProblemId>,
    cfg_path: Option<&Path>,
    grid: Option<Vec<usize>>,
    out: Option<&Path>,
) -> dgpinn::Result<u8> {
    let ck = checkpoint::load(ckpt)?;
    if let Some(p) = problem {
        if p != ck.problem {
            return Err(Error::Config(format!("checkpoint holds a {} model, not {p}", ck.problem)));
        }
    }
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let echo = dir.join(CONFIG_FILE);
    let mut cfg = match cfg_path {
        Some(p) => config::from_text(&read_text(p)?)?,
        None if echo.exists() => config::from_text(&read_text(&echo)?)?,
        None => TrainConfig::full(ck.problem),
    };
    if cfg.problem != ck.problem {
        return Err(Error::Config(format!("config is for {}, checkpoint for {}", cfg.problem, ck.problem)));
    }
    if grid.is_some() {
        cfg.grid = grid;
    }
    if ck.state.network.widths() != cfg.widths().as_slice() {
        return Err(Error::Config(format!(
            "checkpoint widths {:?} do not match the configuration {:?}",
            ck.state.network.widths(),
            cfg.widths()
        )));
    }
    let (problem, bundle) = trainer::prepare_data(&cfg)?;
    let metrics = evaluate_metrics(&problem, &ck.state, &bundle)?;
    for e in &metrics.estimates {
        println!("{:<10} estimate {:.6e}  truth {:.6e}  APE {:.4}%", e.name, e.estimate, e.truth, e.ape);
    }
    for e in &metrics.test_errors {
        println!("R_t({})  {:.4e}  (vs observed {:.4e})", e.channel, e.rt, e.rt_observed);
    }
    let report_path = dir.join(REPORT_FILE);
    if report_path.exists() && cfg_path.is_none() {
        let r = trainer::read_report(&report_path)?;
        println!("max deviation from {}: {:e}", report_path.display(), deviation(&metrics, &r));
    }
    if let Some(o) = out {
        write_json(o, &metrics)?;
    }
    Ok(0)
}

fn deviation(m: &Metrics, r: &RunReport) -> f64 {
    let a = m.estimates.iter().zip(&r.estimates).map(|(x, y)| (x.ape - y.ape).abs());
    let b = m.test_errors.iter().zip(&r.test_errors).map(|(x, y)| (x.rt - y.rt).abs());
    a.chain(b).fold(0.0, f64::max)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { run, rerun } => train(&run, rerun.as_deref()),
        Command::Compare { run, trials, jobs } => compare(&run, trials, jobs),
        Command::SweepM1 { run, values, jobs } => sweep(&run, SweepAxis::M1, &values, jobs),
        Command::SweepNd { run, values, jobs } => sweep(&run, SweepAxis::Nd, &values, jobs),
        Command::NoiseStudy { run, values, jobs } => sweep(&run, SweepAxis::SnrDb, &values, jobs),
        Command::GenData { problem, grid, out } => gen_data(problem, grid.as_deref(), &out),
        Command::Eval { checkpoint, problem, config, grid, out } => {
            eval(&checkpoint, problem, config.as_deref(), grid, out.as_deref())
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
