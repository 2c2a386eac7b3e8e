//! The `munet` command line.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failing gradient
//! suite), 2 invalid configuration or inputs that disagree with it.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

pub use commands::{cmd_analyze, cmd_eval, cmd_generate, cmd_gradcheck, cmd_train};
pub use config::{RunConfig, FROZEN_CONFIG};

use crate::analysis::BranchRule;
use crate::error::{Error, Result};
use crate::network::Variant;

#[derive(Debug, Parser)]
#[command(name = "munet", version, about = "U-Net / mU-Net segmentation: data, training, evaluation and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.max_epochs=50`.
    /// Applied after the file, in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More progress output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (train/val/test splits and manifest).
    Generate {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Use the stronger thick-slice blur.
        #[arg(long)]
        thick_slice: bool,
    },
    /// Train a network on the train split of a dataset.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Score a checkpoint (or the ground truth itself) on a split.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Evaluate the labels against themselves.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Permeation rates of every object through the skip connections.
    Analyze {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Zero every residual-path deconvolution before analyzing.
        #[arg(long)]
        zero_residual: bool,
        /// Also emit one record per feature channel.
        #[arg(long)]
        per_channel: bool,
        /// Quantifier of the below-threshold condition.
        #[arg(long, value_name = "all-below|any-below")]
        rule: Option<BranchRule>,
        /// Write normalized maps as PGM images.
        #[arg(long)]
        dump_maps: bool,
        /// Additional tap points to dump (see the network manifest).
        #[arg(long = "tap", value_name = "NAME")]
        taps: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Finite-difference check of every primitive and the skip block.
    Gradcheck {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Scale convolution-kernel gradients to simulate a broken backward.
        #[arg(long, value_name = "SCALE")]
        inject_fault: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
    },
}

/// What a successful command reports back to the process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command ran but its check failed.
    CheckFailed,
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

/// Resolve the configuration for `cli` and run the command.
pub fn run(cli: Cli) -> Result<Outcome> {
    let c = &cli.common;
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("data.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = RunConfig::resolve(c.config.as_deref(), &overrides)?;
    if c.quiet {
        cfg.verbosity = 0;
    } else if c.verbose > 0 {
        cfg.verbosity = 1 + c.verbose;
    }
    match cli.command {
        Command::Generate { out, thick_slice } => {
            set_path(&mut cfg.paths.out, out);
            cfg.data.thick_slice |= thick_slice;
            cmd_generate(&cfg)
        }
        Command::Train { data, out, resume, variant, epochs } => {
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.out, out);
            set_path(&mut cfg.paths.checkpoint, resume.clone());
            if let Some(v) = variant {
                cfg.network.variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            cmd_train(&cfg, resume.is_some())
        }
        Command::Eval { data, checkpoint, out, split, ground_truth } => {
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.out, out);
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            cfg.eval.ground_truth |= ground_truth;
            cmd_eval(&cfg)
        }
        Command::Analyze { data, checkpoint, out, split, zero_residual, per_channel, rule, dump_maps, taps, limit } => {
            set_path(&mut cfg.paths.data, data);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.out, out);
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            let a = &mut cfg.analysis;
            a.zero_residual |= zero_residual;
            a.per_channel |= per_channel;
            a.dump_maps |= dump_maps;
            a.taps.extend(taps);
            if let Some(r) = rule {
                a.rule = r;
            }
            if let Some(l) = limit {
                a.limit = l;
            }
            cmd_analyze(&cfg)
        }
        Command::Gradcheck { out, inject_fault, eps } => {
            set_path(&mut cfg.paths.out, out);
            if let Some(s) = inject_fault {
                cfg.gradcheck.fault_scale = s;
            }
            if let Some(e) = eps {
                cfg.gradcheck.eps = e;
            }
            cmd_gradcheck(&cfg)
        }
    }
}

pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(e) if e.is_validation() => 2,
        Err(_) => 1,
    }
}

/// Parse `args`, run, report errors on stderr and return the exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}

pub(crate) fn require<'a>(slot: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    slot.as_ref().ok_or_else(|| Error::Config(format!("{what} is required (flag or [paths] entry)")))
}
