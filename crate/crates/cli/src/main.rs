//! `mpde` — single solves, frequency sweeps and basis export as CSV.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpde::{
    frequency_sweep, matched_accuracy_speedup, solve, MatchedAccuracy, PwmBasis, SweepOptions,
};

use config::{ConfigError, RunConfig};
use output::CsvFile;

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;

/// Frequencies of the matched-accuracy table.
const TABLE_FREQUENCIES: [f64; 3] = [10e3, 50e3, 100e3];

#[derive(Debug, Parser)]
#[command(
    name = "mpde",
    version,
    about = "Multirate simulation of a PWM buck converter with a saturating inductor",
    after_help = "Any config key can be overridden as --key=value, e.g. --fs=1e4 --np=6."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// reference, mpde-simplified or mpde-original.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run sweep frequencies one at a time for undisturbed timings.
    #[arg(long, global = true)]
    serial_timing: bool,

    /// Config override `key=value`; `--key=value` is shorthand.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation; writes solution.csv (and coefficients.csv for MPDE modes).
    Solve,
    /// Frequency sweep; writes sweep.csv and table1.csv.
    Sweep,
    /// Export the basis functions and their Gram matrix.
    Basis,
}

const FLAGS: [&str; 6] = ["config", "mode", "out", "serial-timing", "set", "help"];

/// Rewrites `--key=value` for config keys into `--set key=value`.
fn expand_overrides(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            Some((key, _)) if !FLAGS.contains(&key) => {
                out.push("--set".into());
                out.push(arg[2..].to_string());
            }
            _ => out.push(arg),
        }
    }
    out
}

enum Failure {
    Config(String),
    Solver(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Solver(format!("output: {e}"))
    }
}

impl From<mpde::Error> for Failure {
    fn from(e: mpde::Error) -> Self {
        Failure::Solver(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_overrides(std::env::args())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(mode) = &cli.mode {
        overrides.push(format!("mode={mode}"));
    }
    if cli.serial_timing {
        overrides.push("serial_timing=true".into());
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match cli.command {
        Command::Solve => cmd_solve(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Basis => cmd_basis(&cfg),
    }
}

fn cmd_solve(cfg: &RunConfig) -> Result<(), Failure> {
    let spec = cfg.simulation_spec()?;
    let record = solve(&spec)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut header = vec!["t".to_string()];
    header.extend(record.state_names.iter().cloned());
    let mut file = CsvFile::create(&cfg.out_dir.join("solution.csv"), &header)?;
    for (i, &t) in record.samples.times.iter().enumerate() {
        let row: Vec<f64> = std::iter::once(t)
            .chain(record.samples.states.iter().map(|col| col[i]))
            .collect();
        file.numbers(&row)?;
    }
    file.finish()?;

    if record.basis().is_some() {
        let mut header = vec!["t1".to_string()];
        for j in 1..=record.ns() {
            for k in 0..=record.np {
                header.push(format!("w_{j}_{k}"));
            }
        }
        let mut file = CsvFile::create(&cfg.out_dir.join("coefficients.csv"), &header)?;
        let traj = &record.trajectory;
        for (i, &t) in traj.times().iter().enumerate() {
            let row: Vec<f64> = std::iter::once(t)
                .chain(traj.value(i).iter().copied())
                .collect();
            file.numbers(&row)?;
        }
        file.finish()?;
    }

    println!("mode: {}", spec.mode);
    println!("solve time: {:.6} s", record.solve_time);
    println!("setup time: {:.6} s", record.setup_time);
    println!("steps: {}", record.steps);
    Ok(())
}

fn sweep_options(cfg: &RunConfig) -> Result<SweepOptions, Failure> {
    Ok(SweepOptions {
        serial_timing: cfg.serial_timing,
        timing_repeats: cfg.timing_repeats,
        reference_tol: cfg.tol_reference,
        mpde_tol: cfg.tol_mpde,
        component: cfg.error_component()?,
    })
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.sweep_frequencies.is_empty() {
        return Err(Failure::Config("sweep_frequencies is empty".into()));
    }
    let base = cfg.simulation_spec()?;
    let opts = sweep_options(cfg)?;
    let report = frequency_sweep(&cfg.sweep_frequencies, &base, &opts)
        .map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let with_error = report.rows.iter().any(|r| r.error.is_some());
    let mut header: Vec<String> = [
        "fs_hz",
        "eps_simplified",
        "eps_original",
        "t_mpde_simplified_s",
        "t_mpde_original_s",
        "t_reference_s",
        "speedup",
    ]
    .map(String::from)
    .to_vec();
    if with_error {
        header.push("error".into());
    }
    let mut file = CsvFile::create(&cfg.out_dir.join("sweep.csv"), &header)?;
    for row in &report.rows {
        let values = [
            row.fs,
            row.eps_simplified,
            row.eps_original,
            row.t_mpde_simplified,
            row.t_mpde_original,
            row.t_reference,
            row.speedup,
        ];
        let note = with_error.then(|| row.error.clone().unwrap_or_default());
        file.numbers_with_note(&values, note.as_deref())?;
        println!(
            "fs = {:>8} Hz  eps_s = {:.3e}  eps_o = {:.3e}  t_ref = {:.4} s  t_mpde = {:.4} s  speedup = {:.2}{}",
            row.fs,
            row.eps_simplified,
            row.eps_original,
            row.t_reference,
            row.t_mpde_simplified,
            row.speedup,
            row.error.as_deref().map(|e| format!("  [{e}]")).unwrap_or_default()
        );
    }
    file.finish()?;

    let table: Vec<(f64, Result<MatchedAccuracy, mpde::Error>)> = TABLE_FREQUENCIES
        .iter()
        .map(|&fs| (fs, matched_accuracy_speedup(fs, &base, &opts)))
        .collect();
    let with_error = table.iter().any(|(_, r)| r.is_err());
    let mut header: Vec<String> = [
        "fs_hz",
        "eps_mpde",
        "reference_tol",
        "eps_reference",
        "t_reference_s",
        "t_mpde_s",
        "speedup",
    ]
    .map(String::from)
    .to_vec();
    if with_error {
        header.push("error".into());
    }
    let mut file = CsvFile::create(&cfg.out_dir.join("table1.csv"), &header)?;
    for (fs, result) in &table {
        let (values, note) = match result {
            Ok(m) => (
                [
                    m.fs,
                    m.eps_mpde,
                    m.reference_tol,
                    m.eps_reference,
                    m.t_reference,
                    m.t_mpde,
                    m.speedup,
                ],
                String::new(),
            ),
            Err(e) => (
                [
                    *fs,
                    f64::NAN,
                    f64::NAN,
                    f64::NAN,
                    f64::NAN,
                    f64::NAN,
                    f64::NAN,
                ],
                e.to_string(),
            ),
        };
        file.numbers_with_note(&values, with_error.then_some(note.as_str()))?;
        match result {
            Ok(m) => println!(
                "matched accuracy fs = {:>8} Hz  eps = {:.3e}  reference tol = {:e}  speedup = {:.2}",
                m.fs, m.eps_mpde, m.reference_tol, m.speedup
            ),
            Err(e) => println!("matched accuracy fs = {fs:>8} Hz  failed: {e}"),
        }
    }
    file.finish()?;
    Ok(())
}

/// Uniform tau samples of the basis export.
const BASIS_SAMPLES: usize = 1001;

fn cmd_basis(cfg: &RunConfig) -> Result<(), Failure> {
    let basis = PwmBasis::new(cfg.d_basis(), cfg.np).map_err(|e| Failure::Config(e.to_string()))?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let names: Vec<String> = (0..basis.len()).map(|k| format!("p{k}")).collect();

    let mut header = vec!["tau".to_string()];
    header.extend(names.iter().cloned());
    let mut file = CsvFile::create(&cfg.out_dir.join("basis.csv"), &header)?;
    let mut row = vec![0.0; basis.len() + 1];
    for i in 0..BASIS_SAMPLES {
        let tau = i as f64 / (BASIS_SAMPLES - 1) as f64;
        row[0] = tau;
        basis.values_into(tau, &mut row[1..]);
        file.numbers(&row)?;
    }
    file.finish()?;

    let gram = basis.gram();
    let mut file = CsvFile::create(&cfg.out_dir.join("gram.csv"), &names)?;
    for i in 0..gram.nrows() {
        let row: Vec<f64> = gram.row(i).iter().copied().collect();
        file.numbers(&row)?;
    }
    file.finish()?;

    let off_diagonal = (0..gram.nrows())
        .flat_map(|i| {
            (0..gram.ncols())
                .filter(move |&j| j != i)
                .map(move |j| (i, j))
        })
        .map(|(i, j)| gram[(i, j)].abs())
        .fold(0.0, f64::max);
    println!("basis order {} with D = {}", cfg.np, cfg.d_basis());
    println!("max off-diagonal Gram entry: {off_diagonal:e}");
    Ok(())
}
