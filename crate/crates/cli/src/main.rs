//! `resonance-tracer`: batch front end for S-matrix pole tracing studies.

mod complex;
mod config;
mod error;
mod output;
mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use num_complex::Complex64;

use resonance_core::solver::residual_scale;
use resonance_core::tracer::{find_bound_state, run_study, TracerError};
use resonance_core::{RadialGrid, RadialPotential, RadialProblem};

use crate::complex::{format_complex, parse_complex};
use crate::config::StudyConfig;
use crate::error::CliError;

const THREADS_VAR: &str = "RESONANCE_TRACER_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "resonance-tracer",
    version,
    about = "Trace S-matrix poles of radial potentials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scattering amplitudes at one (k, λ).
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, allow_hyphen_values = true)]
        lambda: f64,
        /// Complex momentum, e.g. `0.5`, `0+0.93i`, `1-2i`.
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        k: Complex64,
    },
    /// Bound-state poles k = i·y on the positive imaginary axis.
    Seeds {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, required = true, num_args = 1..)]
        lambda: Vec<f64>,
        /// Search interval for y, as `lo,hi`.
        #[arg(long, value_parser = parse_bracket, default_value = "0.1,3")]
        bracket: (f64, f64),
    },
    /// Run a study described by a configuration file.
    Trace {
        config: PathBuf,
        /// Overrides `output.dir` of the configuration.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write gnuplot data and script for a traced study.
    Plot {
        study_dir: PathBuf,
        /// Defaults to the study directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ProblemArgs {
    /// none, gaussian, square_well, morse, yukawa or lennard_jones.
    #[arg(long)]
    potential: String,
    #[arg(long, default_value_t = 0)]
    l: usize,
    /// Square-well radius.
    #[arg(long)]
    a: Option<f64>,
    /// Further shape parameters as NAME=VALUE.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
    #[arg(long, default_value_t = 4.8)]
    r_end: f64,
    #[arg(long, default_value_t = 8192)]
    n_points: usize,
}

fn parse_bracket(text: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = text
        .split_once(',')
        .ok_or_else(|| format!("expected lo,hi, got '{text}'"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|e| format!("bracket '{text}': {e}"))
    };
    Ok((parse(lo)?, parse(hi)?))
}

fn parse_param(text: &str) -> Result<(String, f64), String> {
    let (name, value) = text
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got '{text}'"))?;
    let value = value
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("parameter {name}: {e}"))?;
    Ok((name.trim().to_string(), value))
}

impl ProblemArgs {
    fn problem(&self) -> Result<RadialProblem, CliError> {
        let mut params: BTreeMap<String, f64> = self.params.iter().cloned().collect();
        if let Some(a) = self.a {
            params.insert("a".to_string(), a);
        }
        let potential = RadialPotential::from_params(&self.potential, &params)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let grid = RadialGrid::new(self.r_end, self.n_points)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        RadialProblem::new(potential, self.l, grid).map_err(|e| CliError::Usage(e.to_string()))
    }
}

fn solve(problem: &ProblemArgs, lambda: f64, k: Complex64) -> Result<(), CliError> {
    let problem = problem.problem()?;
    let amp = problem
        .amplitudes(k, lambda)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    println!("k = {}", format_complex(k));
    println!("lambda = {}", output::fmt_real(lambda));
    println!("A = {}", format_complex(amp.a));
    println!("B = {}", format_complex(amp.b));
    println!("S = {}", format_complex(amp.s));
    match amp.f {
        Some(f) => {
            println!("F = {}", format_complex(f));
            println!(
                "|F|/scale = {:.6e}",
                f.norm() / residual_scale(problem.l(), k)
            );
        }
        None => println!("F = undefined (S = 1)"),
    }
    Ok(())
}

fn seeds(problem: &ProblemArgs, lambdas: &[f64], bracket: (f64, f64)) -> Result<(), CliError> {
    let problem = problem.problem()?;
    println!("lambda im_k residual zeros_in_bracket");
    for &lambda in lambdas {
        let b = find_bound_state(&problem, lambda, bracket).map_err(|e| match e {
            TracerError::InvalidStudy(msg) => CliError::Usage(msg),
            other => CliError::Numerical(other.to_string()),
        })?;
        println!(
            "{} {} {:.3e} {}",
            output::fmt_real(lambda),
            output::fmt_real(b.im_k),
            b.residual,
            b.zeros_in_bracket
        );
    }
    Ok(())
}

fn trace(config_path: &Path, output_override: Option<&Path>) -> Result<(), CliError> {
    let config = StudyConfig::load(config_path)?;
    let study = config.to_study()?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let dir = match output_override {
        Some(dir) => dir.to_path_buf(),
        None => config.output_dir(base),
    };
    let result = run_study(&study).map_err(|e| match e {
        TracerError::NoSeeds | TracerError::InvalidStudy(_) | TracerError::Potential(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Numerical(other.to_string()),
    })?;
    for f in &result.failures {
        warn!(
            "seed {} (λ = {}) failed: {}",
            f.seed_index,
            f.seed.lambda(),
            f.message
        );
    }
    let files = output::write_study(&dir, &config, &result)?;
    let events: usize = result.branches.iter().map(|b| b.branch.events.len()).sum();
    println!(
        "{} branches in {} files, {events} bifurcation events, {} failed seeds -> {}",
        result.branches.len(),
        files.len(),
        result.failures.len(),
        dir.display()
    );
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "{THREADS_VAR} must be a non-negative integer, got '{value}'"
        ))
    })?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("{THREADS_VAR}: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Solve { problem, lambda, k } => solve(&problem, lambda, k),
        Command::Seeds {
            problem,
            lambda,
            bracket,
        } => seeds(&problem, &lambda, bracket),
        Command::Trace { config, output } => trace(&config, output.as_deref()),
        Command::Plot { study_dir, output } => {
            let out = output.unwrap_or_else(|| study_dir.clone());
            let written = plot::write_plot_data(&study_dir, &out)?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
