mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::EvalInput;
use config::{extract_overrides, RunConfig};
use error::CliError;

/// Translate simulated LiDAR range images into realistic ones with a
/// raydrop-aware diffusion prior.
///
/// Any configuration value can be overridden with `--section.key value`,
/// e.g. `--sampler.t-init 0.6` or `--guidance.eta -0.2`.
#[derive(Parser, Debug)]
#[command(name = "drum", version)]
struct Cli {
    /// JSON run configuration; overrides are applied on top.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate paired-geometry toy scans in the sim and real domains.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_sim: usize,
        #[arg(long, default_value_t = 400)]
        n_real: usize,
    },
    /// Train the diffusion prior on a directory of range images.
    TrainPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every simulated scan in a directory.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write PNG previews.
        #[arg(long)]
        png: bool,
        /// Audit label consistency; exit 1 on any violation.
        #[arg(long)]
        verify: bool,
    },
    /// Fréchet distance and raydrop statistics between two sets.
    Eval {
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        /// Precomputed features for set A instead of the builtin ones.
        #[arg(long)]
        features_a: Option<PathBuf>,
        #[arg(long)]
        features_b: Option<PathBuf>,
        #[arg(long, default_value = "eval_report.json")]
        report: PathBuf,
    },
    /// Write 8-bit PNG previews of range images.
    ExportPng {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    if cli.jobs == 0 {
        return Err(CliError::Validation("--jobs must be at least 1".into()));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::MakeToy { out, n_sim, n_real } => {
            commands::make_toy(&cfg, &out, n_sim, n_real, cli.jobs)?;
        }
        Command::TrainPrior { data, out, resume } => {
            commands::train_prior(&cfg, &data, &out, resume.as_deref())?;
        }
        Command::Translate { ckpt, input, out, png, verify } => {
            let s = commands::translate(&cfg, &ckpt, &input, &out, png, verify, cli.jobs)?;
            println!(
                "translated {} scans, {} failed, mean raydrop ratio {:.4}",
                s.translated,
                s.failed.len(),
                s.mean_raydrop_ratio
            );
            if verify {
                println!("label audit: {}/{} passed", s.verified - s.violations.len(), s.verified);
            }
            if !s.failed.is_empty() {
                return Err(CliError::Numeric(format!("{} samples failed", s.failed.len())));
            }
            if !s.violations.is_empty() {
                return Err(CliError::Validation(format!(
                    "{} outputs failed the label audit",
                    s.violations.len()
                )));
            }
        }
        Command::Eval { a, b, features_a, features_b, report } => {
            let a = EvalInput { dir: a.as_deref(), features: features_a.as_deref() };
            let b = EvalInput { dir: b.as_deref(), features: features_b.as_deref() };
            commands::eval(&cfg, a, b, &report)?;
        }
        Command::ExportPng { input, out } => {
            let n = commands::export_png(&input, &out)?;
            println!("exported {n} images");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let (overrides, rest) = match extract_overrides(&args[1..]) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(std::iter::once(args[0].clone()).chain(rest)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
