// Negated comparisons are deliberate: NaN must take the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod experiment;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{Method, Overrides};
use sketchsolve::data::{build_instance, export_instance, import_instance, MatrixStorage};

#[derive(Parser)]
#[command(name = "sketchsolve", version, about = "Randomized sketch-and-project experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured trials and write the trace CSV and summary.
    Run(RunArgs),
    /// Run the trials and check them against the matching rate certificate.
    Validate(RunArgs),
    /// Print the spectral summary of the configured sketch distribution.
    Spectrum(RunArgs),
    /// Build a problem recipe and write it as an instance container.
    Gen {
        recipe: PathBuf,
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Block size.
    #[arg(long)]
    d: Option<usize>,
    /// Inner iterations.
    #[arg(long)]
    r: Option<usize>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    toml::Value::String(s.to_string())
        .try_into()
        .map_err(|_| format!("unknown method `{s}`"))
}

impl RunArgs {
    fn load(&self) -> Result<config::ExperimentConfig> {
        let ov = Overrides {
            method: self.method,
            seed: self.seed,
            trials: self.trials,
            omega: self.omega,
            tol: self.tol,
            max_iters: self.max_iters,
            d: self.d,
            r: self.r,
            out_dir: self.out_dir.clone(),
        };
        config::load(&self.config, &ov)
    }
}

fn run(args: &RunArgs, validate: bool) -> Result<bool> {
    let cfg = args.load()?;
    let summary = experiment::run_experiment(&cfg, validate)?;
    println!("{}", serde_json::to_string(&summary)?);
    eprintln!("trace:   {}", cfg.trace_path.display());
    eprintln!("summary: {}", cfg.summary_path.display());
    Ok(summary.success())
}

fn gen(recipe: &Path, out: &Path) -> Result<bool> {
    let (recipe, container) = config::load_recipe(recipe)?;
    let data = match container {
        Some(path) => import_instance(&path)?,
        None => build_instance(&recipe)?.data,
    };
    export_instance(&data, out).with_context(|| format!("writing {}", out.display()))?;
    let storage = match &data.a {
        MatrixStorage::Dense(_) => "dense".to_string(),
        MatrixStorage::Sparse(s) => format!("sparse, nnz {}", s.nnz()),
    };
    println!("wrote {}x{} instance ({storage}) to {}", data.a.nrows(), data.a.ncols(), out.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => run(args, false),
        Command::Validate(args) => run(args, true),
        Command::Spectrum(args) => args.load().and_then(|cfg| experiment::spectrum_report(&cfg)).map(|report| {
            print!("{report}");
            true
        }),
        Command::Gen { recipe, out } => gen(recipe, out),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
