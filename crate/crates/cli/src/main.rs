use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nvrelax::FitOptions;
use nvrelax_cli::{calibrate, fit, plot, quantify_cmd, render_json, simulate, CliError};

/// NV-center T1 relaxometry: simulate, fit, calibrate, quantify, plot.
#[derive(Parser)]
#[command(name = "nvrelax", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a T1 sweep from an experiment config into traces.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a single exponential to traces.csv and write fit.json.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Iteration cap; hitting it exits with status 3.
        #[arg(long, default_value_t = FitOptions::default().max_iter)]
        max_iter: usize,
    },
    /// Fit the T1-versus-amount line in calib.csv and write model.json.
    Calibrate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Detection-limit multiplier on sigma_t1.
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        /// Lower bound on sigma_t1, ms.
        #[arg(long, default_value_t = nvrelax::assay::DEFAULT_SIGMA_FLOOR_MS)]
        sigma_floor: f64,
    },
    /// Convert a measured T1 to an amount using model.json; prints JSON.
    Quantify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        t1_ms: f64,
        #[arg(long, default_value_t = 0.0)]
        t1_err_ms: f64,
    },
    /// Render traces.csv (and optionally fit.json) to SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out, seed } => {
            simulate(&config, &out, seed)?;
        }
        Command::Fit { input, out, max_iter } => {
            let options = FitOptions {
                max_iter,
                ..FitOptions::default()
            };
            let report = fit(&input, &out, &options)?;
            eprintln!("T1 = {} ± {} ms", report.fit.t1_ms, report.fit.t1_err_ms);
        }
        Command::Calibrate {
            input,
            out,
            k,
            sigma_floor,
        } => {
            let model = calibrate(&input, &out, k, sigma_floor)?;
            if model.direction_warning {
                eprintln!("warning: T1 does not decrease with amount (slope = {})", model.slope);
            }
        }
        Command::Quantify { model, t1_ms, t1_err_ms } => {
            print!("{}", render_json(&quantify_cmd(&model, t1_ms, t1_err_ms)?));
        }
        Command::Plot { input, fit, out } => {
            plot(&input, fit.as_deref(), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
