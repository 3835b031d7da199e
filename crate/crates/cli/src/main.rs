//! `gdnorm` — command-line harness for the debiased-BN experiments:
//! synthetic data generation, training (GDNorm or the shared-BN baseline),
//! held-out evaluation of mean/single/ensemble paths, the lambda sweep,
//! path export/import, and the verification suite.
//!
//! Exit codes: 0 success, 1 contract/criterion failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "gdnorm",
    version,
    about = "Debiased batch normalization via a Gaussian process over domain-specific BN parameters: desk-scale experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Experiment config file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override (flag beats the GDNORM_SEED env var, which beats the
    /// config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum OutputFormat {
    Json,
    Table,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TrainerArg {
    Gdnorm,
    SharedBn,
    SharedBnMatched,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain datasets plus a manifest.
    Gen {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train a model and write checkpoint, paths and metrics logs.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory of dataset files from `gen`; generated in memory when
        /// omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        trainer: Option<TrainerArg>,
    },
    /// Evaluate a checkpoint on the held-out domain.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
    },
    /// Train once per lambda in the grid and report mean-path scores, plus
    /// the sampled-path spread on the default-lambda checkpoint.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a BN path (mean, one domain's, or a sampled one) to a file.
    ExportPath {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One of: mean | domain:<k> | sample:<seed>
        #[arg(long, default_value = "mean")]
        kind: String,
        /// Sampling ratio for kind = sample:<seed>.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Load a path file and evaluate it with a checkpoint's weights.
    ImportPath {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
    },
    /// Run the verification suite and print one line per criterion.
    Repro {
        /// "unit" (fast property checks) or "full" (all criteria).
        #[arg(long, default_value = "full")]
        suite: String,
        /// Optional report file (line-delimited JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Gen { common } => commands::cmd_gen(&common),
        Cmd::Train {
            common,
            data,
            epochs,
            trainer,
        } => commands::cmd_train(&common, data.as_deref(), epochs, trainer),
        Cmd::Eval {
            common,
            checkpoint,
            data,
            format,
        } => commands::cmd_eval(&common, &checkpoint, data.as_deref(), format),
        Cmd::Sweep { common, data } => commands::cmd_sweep(&common, data.as_deref()),
        Cmd::ExportPath {
            checkpoint,
            out,
            kind,
            lambda,
        } => commands::cmd_export_path(&checkpoint, &out, &kind, lambda),
        Cmd::ImportPath {
            common,
            path,
            checkpoint,
            data,
            format,
        } => commands::cmd_import_path(&common, &path, &checkpoint, data.as_deref(), format),
        Cmd::Repro { suite, out } => commands::cmd_repro(&suite, out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
