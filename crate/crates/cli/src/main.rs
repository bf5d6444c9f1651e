//! `msdecomp` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use msdecomp::euclid_ccgf::{EuclidFlowConfig, LambdaVariant, Scheme};
use msdecomp::{DecompError, Result};
use msdecomp_cli::commands::{cmd_compare, cmd_diagnose, cmd_emit_plots, cmd_euclid, cmd_run, exit_code, Baseline, DiagnoseOptions};

#[derive(Parser)]
#[command(name = "msdecomp", version, about = "Measure decomposition by constrained Wasserstein gradient flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Slices,
    Quantile,
    GrandLeague,
    Run,
}

#[derive(Subcommand)]
enum Command {
    /// Run the flow described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a completed run with a baseline decomposition.
    Compare {
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        baseline: BaselineKind,
        /// Slicing axis for the slices baseline (0-based).
        #[arg(long, default_value_t = 0)]
        axis: usize,
        /// Lower-league weight for the quantile baseline.
        #[arg(long, default_value_t = 0.5)]
        w1: f64,
        /// Other run directory for the run baseline.
        #[arg(long)]
        other: Option<PathBuf>,
        /// Number of fresh target samples for sampled baselines.
        #[arg(long, default_value_t = 4000)]
        samples: usize,
    },
    /// Structural diagnostics of one particle snapshot.
    Diagnose {
        snapshot: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated group weights.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        c: Option<f64>,
    },
    /// Write plot-ready CSVs for a completed run.
    EmitPlots { run_dir: PathBuf },
    /// Euclidean constrained flow on a built-in problem.
    Euclid {
        #[command(subcommand)]
        action: EuclidAction,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Equality,
    PositivePart,
}

#[derive(Subcommand)]
enum EuclidAction {
    Run {
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-3)]
        tau: f64,
        #[arg(long, value_enum, default_value = "rk4")]
        scheme: SchemeArg,
        #[arg(long, value_enum, default_value = "equality")]
        variant: VariantArg,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        /// Comma-separated start point (defaults to the problem's own).
        #[arg(long, value_delimiter = ',')]
        x0: Option<Vec<f64>>,
        /// Trajectory CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json(v: &impl serde::Serialize) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("warning: cannot render report: {e}"),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MS_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| DecompError::Config(format!("MS_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(DecompError::Config("MS_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DecompError::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<u8> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, out } => {
            let outcome = cmd_run(&config, out.as_deref())?;
            eprintln!("wrote {}", outcome.dir.display());
            print_json(&outcome.report);
            if let Some(f) = &outcome.record.failure {
                eprintln!("error: run stopped at iteration {}: {}", f.iteration, f.message);
                return Ok(3);
            }
        }
        Command::Compare { run_dir, baseline, axis, w1, other, samples } => {
            let b = match baseline {
                BaselineKind::Slices => Baseline::Slices { axis },
                BaselineKind::Quantile => Baseline::Quantile { w1 },
                BaselineKind::GrandLeague => Baseline::GrandLeague,
                BaselineKind::Run => Baseline::Run(
                    other.ok_or_else(|| DecompError::Config("--baseline run needs --other <dir>".into()))?,
                ),
            };
            print_json(&cmd_compare(&run_dir, &b, samples)?);
        }
        Command::Diagnose { snapshot, config, weights, out, delta, c } => {
            let opts = DiagnoseOptions { config, weights, out, delta, c };
            print_json(&cmd_diagnose(&snapshot, &opts)?);
        }
        Command::EmitPlots { run_dir } => {
            for f in cmd_emit_plots(&run_dir)?.files {
                println!("{}", f.display());
            }
        }
        Command::Euclid { action: EuclidAction::Run { problem, alpha, tau, scheme, variant, t_end, x0, out } } => {
            let cfg = EuclidFlowConfig {
                alpha,
                tau,
                scheme: match scheme {
                    SchemeArg::Euler => Scheme::Euler,
                    SchemeArg::Rk4 => Scheme::Rk4,
                },
                lambda_variant: match variant {
                    VariantArg::Equality => LambdaVariant::Equality,
                    VariantArg::PositivePart => LambdaVariant::PositivePart,
                },
                ..EuclidFlowConfig::default()
            };
            print_json(&cmd_euclid(&problem, x0, &cfg, t_end, out.as_deref())?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
