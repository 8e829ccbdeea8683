use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aimpc_core::io::{
    bench_csv, bench_summary_json, comparison_json, csv_rows, load_scenario, metrics_json, parse_mode,
    plot_from_csv, write_atomic, write_csv, IoError, PlotKind, ScenarioFile,
};
use aimpc_core::neighbor::NvTrueWeights;
use aimpc_core::sim::{compute_metrics, impute_bench, run_scenario, run_unimpeded, BenchSetup, Metrics, Mode, Scenario};

#[derive(Parser)]
#[command(name = "aimpc", version, about = "Interactive merge planner simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trajectory CSV, metrics JSON and plots.
    Run {
        config: PathBuf,
        /// aimpc, nonadaptive, cv or ca; defaults to the file's mode.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Accepted for harness compatibility; runs are deterministic.
        #[arg(long)]
        seed: Option<u64>,
        /// Include solve times in the metrics.
        #[arg(long)]
        timing: bool,
    },
    /// Run several modes plus the ego-free reference and compare them.
    Compare {
        config: PathBuf,
        /// Comma-separated modes, at least two.
        #[arg(long, value_delimiter = ',', default_value = "cv,ca,aimpc")]
        modes: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
    /// Simulate the neighbor alone and impute its weights window by window.
    ImputeBench {
        /// Generating weights `q_s,q_v,q_a`, summing to one.
        #[arg(long, value_delimiter = ',', required = true)]
        nature: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        windows: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// L-infinity error below which the estimate counts as converged.
        #[arg(long, default_value_t = 0.15)]
        tol: f64,
    },
}

/// Failure classes with their exit codes.
enum Failure {
    Config(String),
    Solver(String),
    Output(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Output(_) => 1,
            Failure::Config(_) => 2,
            Failure::Solver(_) => 3,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::File(e) => Failure::Output(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn load(path: &Path) -> Result<ScenarioFile, Failure> {
    let file = load_scenario(path).map_err(|e| match e {
        IoError::File(err) => Failure::Config(format!("{}: {err}", path.display())),
        other => Failure::Config(format!("{}: {other}", path.display())),
    })?;
    for n in &file.notices {
        eprintln!("note: {n}");
    }
    Ok(file)
}

fn resolve_mode(file: &ScenarioFile, label: Option<&str>) -> Result<Mode, Failure> {
    match label {
        Some(l) => Ok(parse_mode(l, file.scenario.alpha0)?),
        None => Ok(file.mode.unwrap_or(Mode::AiMpc)),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Output(format!("{}: {e}", dir.display())))
}

/// Runs one mode and writes its artifacts into `dir`.
fn run_mode(sc: &Scenario, mode: Mode, dir: &Path, timing: bool) -> Result<Metrics, Failure> {
    let sc = sc.clone().with_mode(mode);
    let unimpeded = run_unimpeded(&sc).map_err(|e| Failure::Solver(e.to_string()))?;
    let log = run_scenario(&sc).map_err(|e| Failure::Solver(e.to_string()))?;
    let metrics = compute_metrics(&log, &sc.planner.safety, Some(&unimpeded), timing)
        .map_err(|e| Failure::Solver(e.to_string()))?;
    create_dir(dir)?;
    let csv = write_csv(&csv_rows(&log));
    write_atomic(&dir.join("trajectory.csv"), &csv)?;
    write_atomic(&dir.join("metrics.json"), &metrics_json(&metrics))?;
    // Plots read the emitted file back so they show exactly what was written.
    let written = std::fs::read_to_string(dir.join("trajectory.csv")).map_err(|e| Failure::Output(e.to_string()))?;
    for kind in PlotKind::ALL {
        write_atomic(&dir.join(kind.file_name()), &plot_from_csv(&written, kind)?)?;
    }
    Ok(metrics)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            mode,
            out,
            seed: _,
            timing,
        } => {
            let file = load(&config)?;
            let mode = resolve_mode(&file, mode.as_deref())?;
            let m = run_mode(&file.scenario, mode, &out, timing)?;
            println!(
                "{} {}: {:?}, hindrance {}",
                file.scenario.name,
                mode.label(),
                m.merge_outcome,
                m.hindrance_pct.map_or("n/a".into(), |h| format!("{h:.2} %"))
            );
        }
        Command::Compare {
            config,
            modes,
            out,
            timing,
        } => {
            let file = load(&config)?;
            if modes.len() < 2 {
                return Err(Failure::Config(format!("compare needs at least two modes, got {}", modes.len())));
            }
            let modes = modes
                .iter()
                .map(|l| resolve_mode(&file, Some(l)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut runs = Vec::new();
            for mode in modes {
                let m = run_mode(&file.scenario, mode, &out.join(mode.label()), timing)?;
                println!("{}: {:?}", mode.label(), m.merge_outcome);
                runs.push((mode.label().to_string(), m));
            }
            write_atomic(&out.join("comparison.json"), &comparison_json(&file.scenario.name, &runs))?;
        }
        Command::ImputeBench {
            nature,
            windows,
            out,
            tol,
        } => {
            let [q_s, q_v, q_a] = nature[..] else {
                return Err(Failure::Config("--nature takes three values".into()));
            };
            let ok = [q_s, q_v, q_a].iter().all(|x| x.is_finite() && *x >= 0.0) && ((q_s + q_v + q_a) - 1.0).abs() <= 1e-9;
            if !ok {
                return Err(Failure::Config(format!(
                    "--nature must be nonnegative and sum to one, got {q_s},{q_v},{q_a}"
                )));
            }
            if windows == 0 {
                return Err(Failure::Config("--windows must be at least 1".into()));
            }
            let bench = impute_bench(NvTrueWeights { q_s, q_v, q_a }, windows, &BenchSetup::default())
                .map_err(|e| Failure::Solver(e.to_string()))?;
            create_dir(&out)?;
            write_atomic(&out.join("alpha.csv"), &bench_csv(&bench))?;
            write_atomic(&out.join("summary.json"), &bench_summary_json(&bench, tol))?;
            println!(
                "final error {:.4} ({})",
                bench.final_error().unwrap_or(f64::NAN),
                if bench.converged(tol) { "converged" } else { "not converged" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match &f {
                Failure::Config(m) => ("config error", m),
                Failure::Solver(m) => ("solver abort", m),
                Failure::Output(m) => ("output error", m),
            };
            eprintln!("{kind}: {msg}");
            ExitCode::from(f.code())
        }
    }
}
