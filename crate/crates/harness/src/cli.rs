//! Command-line entry point.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiment::{reconstruct, sensitivity, train_dm};
use crate::figures::cmd_figures;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "udig", about = "Diffusion-guided deep image prior experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the score model described by the config's `diffusion` section.
    TrainDm { config: PathBuf },
    /// Run every configured method on every scan and write results.csv.
    Reconstruct { config: PathBuf },
    /// Render curves and reconstruction panels for a results directory.
    Figures { dir: PathBuf },
    /// Sweep the DIP input perturbation level and record best PSNR.
    Sensitivity { config: PathBuf },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::TrainDm { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = train_dm(&cfg)?;
            let first = report.loss_trace.first().copied().unwrap_or(f64::NAN);
            let last = report.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained score model: loss {first:.4} -> {last:.4}; checkpoint in {}",
                report.checkpoint_dir.display()
            );
            Ok(EXIT_OK)
        }
        Command::Reconstruct { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = reconstruct(&cfg, None)?;
            for row in &report.rows {
                println!(
                    "{:<24} PSNR {:>7.2} ± {:.2} dB  SSIM {:.4} ± {:.4}  {:.2} min",
                    row.method, row.psnr_mean_db, row.psnr_std_db, row.ssim_mean, row.ssim_std, row.runtime_minutes
                );
            }
            for f in &report.failures {
                eprintln!(
                    "scan {} ({}) failed: {}",
                    f.scan,
                    f.method.as_deref().unwrap_or("all methods"),
                    f.error
                );
            }
            println!("results in {}", report.output_dir.display());
            Ok(if report.failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Figures { dir } => {
            let written = cmd_figures(&dir)?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(EXIT_OK)
        }
        Command::Sensitivity { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = sensitivity(&cfg)?;
            for p in &report.points {
                println!(
                    "sigma {:.3}: best PSNR {:.2} ± {:.2} dB over {} runs",
                    p.sigma, p.mean_best_psnr_db, p.std_best_psnr_db, p.n_runs
                );
            }
            Ok(EXIT_OK)
        }
    }
}
