//! Command-line front end. Exit codes: 0 success, 1 check failure,
//! 2 usage or configuration error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{add_gaussian_noise, describe, save_dataset, synth_generate};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::DEFAULT_FPS;
use crate::tensor::OpKind;
use crate::train::{run_ablation, run_eval, run_training, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "rtpca",
    version,
    about = "2D-to-3D pose lifting with pyramidal temporal attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; resumes from --checkpoint when given.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `out_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's evaluation data.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Gaussian noise on the 2D inputs; overrides `noise_sigma`.
        #[arg(long)]
        sigma: Option<f64>,
        /// Score the ground truth against itself (metric pipeline check).
        #[arg(long)]
        gt_as_prediction: bool,
    },
    /// Finite-difference check of every backward rule and the full model.
    Gradcheck {
        /// Perturb one backward rule, by op name, to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Train and evaluate the four model variants per noise level.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Single noise level replacing the config's `ablation.sigmas`.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Write a synthetic dataset as JSON Lines.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 270)]
        frames: usize,
        #[arg(long, default_value_t = 17)]
        joints: usize,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        #[arg(long, default_value_t = DEFAULT_FPS)]
        fps: f64,
        /// Gaussian noise on the 2D coordinates.
        #[arg(long)]
        sigma: Option<f64>,
    },
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(RunConfig, PathBuf)> {
    let (mut cfg, base) = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    } else {
        cfg.out_dir = base.join(&cfg.out_dir);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, base))
}

/// Runs one parsed command, returning the exit code for a completed run.
pub fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let (cfg, base) = load_config(&config, out, seed)?;
            let o = run_training(&cfg, &base, &cfg.out_dir, checkpoint.as_deref())?;
            if let (Some(first), Some(last)) = (o.first, o.last) {
                println!("steps {}: loss {:.4} -> {:.4}", o.steps, first.total, last.total);
            }
            println!(
                "eval mpjpe {:.3} mm, p-mpjpe {:.3} mm, written to {}",
                o.final_report.mpjpe_mm,
                o.final_report.p_mpjpe_mm,
                cfg.out_dir.display()
            );
            Ok(0)
        }
        Command::Eval {
            config,
            checkpoint,
            out,
            sigma,
            gt_as_prediction,
        } => {
            let (cfg, base) = load_config(&config, out, None)?;
            let r = run_eval(&cfg, &base, &checkpoint, &cfg.out_dir, sigma, gt_as_prediction)?;
            println!("{}", serde_json::to_string_pretty(&r.summary())?);
            Ok(0)
        }
        Command::Gradcheck { corrupt_op } => {
            let corrupt = corrupt_op
                .map(|n| OpKind::from_name(&n).ok_or_else(|| Error::Usage(format!("unknown op {n}"))))
                .transpose()?;
            let report = gradcheck::run(corrupt)?;
            print!("{}", report.render());
            if report.passed() {
                Ok(0)
            } else {
                let names: Vec<_> = report.failing().iter().map(|r| r.name.clone()).collect();
                eprintln!("gradient check failed: {}", names.join(", "));
                Ok(1)
            }
        }
        Command::Ablate {
            config,
            out,
            seed,
            sigma,
        } => {
            let (cfg, base) = load_config(&config, out, seed)?;
            let rows = run_ablation(&cfg, &base, &cfg.out_dir, sigma)?;
            println!("{}", crate::train::ABLATION_HEADER);
            for r in rows {
                println!(
                    "{},{},{:.3},{:.3},{:.3},{:.1}",
                    r.variant, r.sigma, r.mpjpe_mm, r.p_mpjpe_mm, r.mpjve_mm, r.accel_mm_s2
                );
            }
            Ok(0)
        }
        Command::Synth {
            out,
            seed,
            frames,
            joints,
            sequences,
            fps,
            sigma,
        } => {
            if joints < 2 || frames == 0 || sequences == 0 || !(fps > 0.0) {
                return Err(Error::Usage(
                    "synth needs at least 2 joints, 1 frame, 1 sequence and a positive fps".into(),
                ));
            }
            let mut seqs = synth_generate(seed, sequences, frames, joints, fps);
            if let Some(s) = sigma {
                seqs = seqs
                    .iter()
                    .enumerate()
                    .map(|(i, q)| add_gaussian_noise(q, s, seed.wrapping_add(i as u64 + 1)))
                    .collect::<Result<_>>()?;
            }
            save_dataset(&out, &seqs)?;
            print!("{}", describe(&seqs));
            Ok(0)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
