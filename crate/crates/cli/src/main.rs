//! Command-line driver: staged reconstruction runs, initialization, module
//! derivative checks, refinement, heuristics and the study sweeps.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime/solver failure,
//! 3 failed derivative check.

mod commands;
mod study;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "pillfit", version, about = "Capsule reconstruction of 2D density fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitModeArg {
    Cross,
    Randcross,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StudyKind {
    Resolution,
    Quadrature,
    Hessian,
    Count,
}

#[derive(Subcommand)]
enum Command {
    /// Staged pipeline end to end: init, stages, export.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Target field file; overrides the config's target source.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Evaluation threads; overrides the config.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Emit a pill table from cross or randomized-cross seeding.
    Init {
        #[arg(long, value_enum)]
        mode: InitModeArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        r0: Option<f64>,
        /// Rotation range of the randomized variant, radians.
        #[arg(long, default_value_t = 0.1)]
        theta_max: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Optional config supplying domain and defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "pills.csv")]
        out: PathBuf,
    },
    /// Module-by-module finite-difference report; nonzero exit on failure.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Residual-guided refinement loop from an existing pill table.
    Refine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pills: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Area/uniqueness report plus prune and merge outputs.
    Heuristics {
        #[arg(long)]
        pills: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Protocol sweeps; each emits a summary CSV.
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Failure carrying its process exit code.
pub(crate) struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<pillfit::Error> for Failure {
    fn from(err: pillfit::Error) -> Self {
        let code = match &err {
            pillfit::Error::Solver(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

/// Failures past validation count as runtime errors regardless of variant.
pub(crate) fn commands_runtime(err: pillfit::Error) -> Failure {
    Failure {
        code: 2,
        message: err.to_string(),
    }
}

pub(crate) type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            target,
            out,
            threads,
        } => commands::run(&config, target.as_deref(), &out, threads),
        Command::Init {
            mode,
            n,
            rows,
            cols,
            r0,
            theta_max,
            seed,
            config,
            out,
        } => commands::init(
            mode,
            n,
            rows,
            cols,
            r0,
            theta_max,
            seed,
            config.as_deref(),
            &out,
        ),
        Command::Gradcheck { config, samples } => commands::gradcheck(&config, samples),
        Command::Refine {
            config,
            pills,
            target,
            out,
            threads,
        } => commands::refine(&config, &pills, target.as_deref(), &out, threads),
        Command::Heuristics { pills, config, out } => commands::heuristics(&pills, &config, &out),
        Command::Study {
            kind,
            config,
            out,
            threads,
        } => study::run(kind, &config, &out, threads),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
