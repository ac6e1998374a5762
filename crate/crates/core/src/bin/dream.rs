use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dream_core::experiment::{
    cmd_compare, cmd_export, cmd_probe, cmd_sample, parse_t_grid, run_gradcheck, Checkpoint, TrainConfig,
};
use dream_core::tensor::OpKind;
use dream_core::{Error, Result};

/// Conditional diffusion training with the DREAM objective on toy
/// super-resolution data.
#[derive(Parser)]
#[command(name = "dream", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Measure the training-versus-sampling discrepancy of a checkpoint.
    Probe {
        checkpoint: PathBuf,
        /// Inclusive grid `start:stop:count`.
        #[arg(long = "t-grid")]
        t_grid: String,
        /// Number of evaluation pairs.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample evaluation images at one or more strides.
    Sample {
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        /// Stride, or a comma-separated list of strides.
        #[arg(long, value_delimiter = ',', required = true)]
        stride: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to `samples/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train two configs that differ only in the objective and compare their discrepancy.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        #[arg(long = "t-grid")]
        t_grid: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Check every backward rule against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write dataset pairs as PGM images.
    Export {
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Export evaluation pairs instead of training pairs.
        #[arg(long)]
        eval: bool,
    },
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, resume, quiet } => {
            let cfg = TrainConfig::load(&config)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let end = dream_core::experiment::run_training(&cfg, resume, !quiet)?;
            println!("trained to iteration {} in {}", end.iteration, cfg.output_dir.display());
        }
        Command::Probe {
            checkpoint,
            t_grid,
            n,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let grid = parse_t_grid(&t_grid)?;
            let out = out.unwrap_or_else(|| parent_dir(&checkpoint));
            let curve = cmd_probe(&ckpt, &grid, n, seed, &out)?;
            print!("{}", curve.to_csv());
        }
        Command::Sample {
            checkpoint,
            n,
            stride,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let out = out.unwrap_or_else(|| parent_dir(&checkpoint).join("samples"));
            let rows = cmd_sample(&ckpt, n, &stride, seed, &out)?;
            for s in &stride {
                let psnr: Vec<f64> = rows.iter().filter(|r| r.stride == *s).map(|r| r.report.psnr).collect();
                println!(
                    "stride {s}: mean psnr {:.3} dB over {} images",
                    psnr.iter().sum::<f64>() / psnr.len() as f64,
                    psnr.len()
                );
            }
        }
        Command::Compare {
            config_a,
            config_b,
            t_grid,
            n,
            seed,
            out,
            quiet,
        } => {
            let a = TrainConfig::load(&config_a)?;
            let b = TrainConfig::load(&config_b)?;
            let grid = parse_t_grid(&t_grid)?;
            let run = cmd_compare(&a, &b, &grid, n, seed, &out, !quiet)?;
            print!("{}", run.comparison.to_csv());
        }
        Command::Gradcheck { seed, inject_fault } => {
            let fault = inject_fault
                .map(|name| OpKind::from_name(&name).ok_or_else(|| Error::Config {
                    key: "inject-fault".into(),
                    message: format!("unknown op {name:?}"),
                }))
                .transpose()?;
            let report = run_gradcheck(seed, fault)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Export { config, n, out, eval } => {
            let cfg = TrainConfig::load(&config)?;
            let written = cmd_export(&cfg, n, eval, &out)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
